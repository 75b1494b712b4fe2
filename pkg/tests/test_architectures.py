import dataclasses

import numpy as np
import pytest

from skippatch import autodiff as ad
from skippatch.architectures import (LayerGraph, LayerSpec, build_discriminator, build_mask_generator,
                                     build_patch_discriminator, build_skip_patch_discriminator,
                                     build_unet_generator, forward, init_params)
from skippatch.autodiff import Tape, Tensor
from skippatch.receptive_field import analyze
from skippatch.rng import SeededRng

# (kernel, in channels, out channels) per conv layer, written out by hand
HAND_TABLES = {
    "p70_c3": [(4, 3, 16), (4, 16, 32), (4, 32, 64), (4, 64, 64), (4, 64, 64), (1, 64, 1)],
    "p16_c3": [(4, 3, 16), (3, 16, 32), (3, 32, 64), (1, 64, 1)],
    "skip_c3": [(4, 3, 16), (4, 16, 32), (4, 32, 64), (4, 64, 64), (4, 64, 64),
                (3, 16, 16), (3, 16, 16), (4, 16, 16), (1, 16, 16), (4, 16, 16), (1, 112, 1)],
    "skip_c4": [(4, 4, 16), (4, 16, 32), (4, 32, 64), (4, 64, 64), (4, 64, 64),
                (3, 16, 16), (3, 16, 16), (4, 16, 16), (1, 16, 16), (4, 16, 16), (1, 112, 1)],
    "mask_r512": [(4, 8, 256), (4, 256, 256), (4, 256, 128), (4, 128, 64), (4, 64, 32), (4, 32, 3)],
    "mask_r64": [(4, 8, 64), (4, 64, 32), (4, 32, 3)],
    "unet_r64_b16": [(4, 3, 16), (4, 16, 32), (4, 32, 64), (4, 64, 128), (4, 128, 256), (4, 256, 512),
                     (4, 512, 256), (4, 512, 128), (4, 256, 64), (4, 128, 32), (4, 64, 16), (4, 32, 1)],
}

GRAPHS = {
    "p70_c3": lambda: build_patch_discriminator("p70", 3, 512),
    "p16_c3": lambda: build_patch_discriminator("p16", 3, 512),
    "skip_c3": lambda: build_skip_patch_discriminator(3, 512),
    "skip_c4": lambda: build_skip_patch_discriminator(4, 64),
    "mask_r512": lambda: build_mask_generator(512),
    "mask_r64": lambda: build_mask_generator(64),
    "unet_r64_b16": lambda: build_unet_generator(64, 16),
}


@pytest.mark.parametrize("name", sorted(GRAPHS))
def test_param_count_matches_hand_table(name):
    expected = sum(k * k * ci * co + co for k, ci, co in HAND_TABLES[name])
    assert GRAPHS[name]().param_count() == expected


def test_mask_generator_full_scale_structure():
    g = build_mask_generator(512)
    ups = [l for l in g.layers if l.kind == "conv_transpose"]
    assert len(ups) == 6
    assert g.layer("z").out_channels == 8


def test_mask_generator_simplex_and_determinism():
    g = build_mask_generator(64)
    params = init_params(g, SeededRng(1))
    z = SeededRng(2).normal((2, 8, 8, 8))
    out = forward(g, params, Tensor(z)).data
    assert out.shape == (2, 3, 64, 64)
    assert np.abs(out.sum(axis=1) - 1).max() < 1e-12
    assert out.min() > 0 and out.max() < 1
    again = forward(g, init_params(g, SeededRng(1)), Tensor(z)).data
    assert np.array_equal(out, again)


def test_mask_generator_rejects_bad_resolution():
    with pytest.raises(ValueError):
        build_mask_generator(48)
    with pytest.raises(ValueError):
        build_mask_generator(1024)


def test_unet_skip_channels():
    g = build_unet_generator(64, 16)
    for layer in g.layers:
        if layer.kind == "concat":
            dec, enc = layer.inputs
            assert g.channels[layer.id] == g.layer(dec).out_channels + g.layer(enc).out_channels
            assert g.layer(dec).kind == "conv_transpose"


def test_unet_forward_range():
    g = build_unet_generator(64, 4)
    out = forward(g, init_params(g, SeededRng(3)), Tensor(SeededRng(4).uniform((3, 64, 64)))).data
    assert out.shape == (1, 64, 64)
    assert np.all(np.isfinite(out)) and out.min() > 0 and out.max() < 1


@pytest.mark.parametrize("variant", ["p16", "p70", "skip"])
@pytest.mark.parametrize("resolution", [16, 64, 128])
def test_discriminator_output_side(variant, resolution):
    g = build_discriminator(variant, 4, resolution)
    out = forward(g, init_params(g, SeededRng(5)), Tensor(SeededRng(6).normal((4, resolution, resolution)))).data
    assert out.shape == (1, resolution // 8, resolution // 8)
    assert out.min() > 0 and out.max() < 1


def test_discriminator_rejects_wrong_input_channels():
    g = build_discriminator("skip", 3, 64)
    with pytest.raises(ad.ShapeError):
        forward(g, init_params(g, SeededRng(0)), Tensor(np.zeros((4, 64, 64))))


def test_skip_zero_input_translation_symmetry():
    g = build_skip_patch_discriminator(3, 64)
    out = forward(g, init_params(g, SeededRng(7)), Tensor(np.zeros((3, 64, 64)))).data
    assert np.all(out == out.flat[0])


COVERAGE = {
    "p16": (lambda: build_patch_discriminator("p16", 3, 64), (1, 3, 64, 64)),
    "p70": (lambda: build_patch_discriminator("p70", 4, 64), (1, 4, 64, 64)),
    "skip": (lambda: build_skip_patch_discriminator(4, 64), (1, 4, 64, 64)),
    "mask": (lambda: build_mask_generator(64), (1, 8, 8, 8)),
    "unet": (lambda: build_unet_generator(32, 4), (1, 3, 32, 32)),
}


@pytest.mark.parametrize("name", sorted(COVERAGE))
def test_every_parameter_receives_gradient(name):
    builder, in_shape = COVERAGE[name]
    g = builder()
    params = init_params(g, SeededRng(9))
    with Tape() as tape:
        out = forward(g, params, Tensor(SeededRng(8).normal(in_shape)))
        loss = ad.sum_all(ad.mul(out, Tensor(SeededRng(10).normal(out.shape))))
    tape.backward(loss)
    for pname, p in params.items():
        assert p.grad is not None, pname
        assert p.grad.shape == p.shape
        if pname.endswith(".weight"):
            assert np.any(p.grad != 0), pname


def test_fusion_replaced_by_t5_head_is_p70():
    skip = build_skip_patch_discriminator(3, 512)
    keep = [l for l in skip.layers if not l.id.startswith("S") and l.id not in ("fuse", "head")]
    head = dataclasses.replace(skip.layer("head"), inputs=("T5",))
    reduced = LayerGraph("reduced", tuple(keep) + (head,))
    p70 = build_patch_discriminator("p70", 3, 512)
    assert analyze(reduced).rf_set == analyze(p70).rf_set == [70]
    x = Tensor(SeededRng(11).normal((3, 64, 64)))
    small = LayerGraph("reduced64", reduced.layers)
    assert forward(small, init_params(small, SeededRng(1)), x).shape == (1, 8, 8)
    assert reduced.param_shapes() == p70.param_shapes()


@pytest.mark.parametrize("name", sorted(GRAPHS))
def test_text_round_trip(name):
    g = GRAPHS[name]()
    back = LayerGraph.from_text(g.to_text())
    assert back == g
    assert back.to_text() == g.to_text()


def test_text_errors():
    with pytest.raises(ValueError, match="line 2"):
        LayerGraph.from_text("x input 1 1 0,0,0,0 3 none none -\ny conv 4 2 1,1 8 none relu x\n")
    with pytest.raises(ValueError, match="not defined"):
        LayerGraph.from_text("x input 1 1 0,0,0,0 3 none none -\ny conv 4 2 1,1,1,1 8 none relu q\n")
    with pytest.raises(ValueError, match="unknown kind"):
        LayerGraph.from_text("x input 1 1 0,0,0,0 3 none none -\ny pool 2 2 0,0,0,0 3 none none x\n")


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerGraph("g", (LayerSpec("x", "input", 1, 1, (0, 0, 0, 0), 3, "none", "none", ()),
                         LayerSpec("y", "conv_transpose", 4, 2, (1, 2, 1, 2), 3, "none", "none", ("x",))))
