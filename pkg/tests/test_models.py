from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cpga import models as M
from cpga.lattice import ConfigError
from cpga.models import ArchKind, ModelSpec

SMALL = (2, 4, 8, 16)
SHAPE16 = (16, 16, 16)


def inputs(n=2, shape=SHAPE16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, 6, generator=g), torch.rand(n, 1, *shape, generator=g), torch.rand(n, 1, *shape, generator=g)


def small(arch, **kw):
    return M.build_model(ModelSpec(arch, SMALL, SHAPE16, **kw), seed=0).eval()


def test_arch_members():
    assert [a.value for a in ArchKind] == ["numeric_only", "image_only", "concat_fusion", "attention_fusion",
                                           "late_film", "hier_film"]
    assert ArchKind.parse("LateFilm") is ArchKind.LATE_FILM
    with pytest.raises(ConfigError):
        ArchKind.parse("transformer")


def test_numeric_encoder_zero_and_hand_values():
    enc = M.NumericEncoder()
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    assert torch.equal(enc(torch.randn(3, 6)), torch.zeros(3, 32))
    with torch.no_grad():
        enc.fc1.weight[0, 0] = 0.5
        enc.fc1.weight[1, 1] = -1.0
        enc.fc1.bias[1] = 0.25
        enc.fc2.weight[0, 0] = 2.0
        enc.fc2.weight[0, 1] = 3.0
        enc.fc2.bias[0] = 0.1
    x = torch.tensor([[2.0, 0.1, 0, 0, 0, 0]])
    # h0 = relu(1.0) = 1, h1 = relu(-0.1 + 0.25) = 0.15; y0 = 2*1 + 3*0.15 + 0.1
    assert enc(x)[0, 0].item() == pytest.approx(2.55, abs=1e-6)
    assert enc(x).shape == (1, 32)


def test_spatial_encoder_shapes():
    enc = M.CNNEncoder(M.PAPER_CHANNELS)
    with torch.no_grad():
        assert enc(torch.zeros(1, 1, 32, 32, 32)).shape == (1, 256, 2, 2, 2)
        assert enc(torch.zeros(1, 1, 32, 160, 160)).shape == (1, 256, 2, 10, 10)


def test_spatial_encoder_rejects_small_input():
    enc = M.CNNEncoder(SMALL)
    with pytest.raises(ConfigError, match="height=8"):
        enc(torch.zeros(1, 1, 16, 8, 16))
    with pytest.raises(ConfigError, match="depth"):
        ModelSpec("late_film", SMALL, (12, 16, 16))


def test_instance_norm_zero_mean_on_constant_input():
    block = M.ConvBlock(1, 4)
    with torch.no_grad():
        z = block.norm(block.conv(torch.full((1, 1, 8, 8, 8), 0.7)))
    np.testing.assert_allclose(z.mean(dim=(2, 3, 4)).numpy(), 0.0, atol=1e-6)


def test_film_identity_zero_and_hand():
    f = torch.randn(3, 2, 4, 4, 4)
    assert torch.equal(M.film_modulate(f, torch.ones(3, 2), torch.zeros(3, 2)), f)
    out = M.film_modulate(f, torch.zeros(3, 2), torch.tensor([[1.0, -2.0]] * 3))
    assert torch.all(out[:, 0] == 1.0) and torch.all(out[:, 1] == -2.0)
    toy = torch.tensor([[[1.0, 2.0]], [[3.0, -4.0]]])  # (C=2, 1, 2)
    out = M.film_modulate(toy, torch.tensor([2.0, -1.0]), torch.tensor([0.5, 0.0]))
    assert out.tolist() == [[[2.5, 4.5]], [[-3.0, 4.0]]]
    with pytest.raises(ConfigError):
        M.film_modulate(toy, torch.ones(3), torch.zeros(3))


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_film_affine_identity(a, b, seed):
    g = torch.Generator().manual_seed(seed)
    f1, f2 = torch.randn(2, 5, 3, generator=g, dtype=torch.float64), torch.randn(2, 5, 3, generator=g,
                                                                                 dtype=torch.float64)
    gamma, beta = torch.randn(2, 5, generator=g, dtype=torch.float64), torch.randn(2, 5, generator=g,
                                                                                   dtype=torch.float64)
    lhs = M.film_modulate(a * f1 + b * f2, gamma, beta)
    rhs = a * M.film_modulate(f1, gamma, beta) + b * M.film_modulate(f2, gamma, beta) \
        - (a + b - 1) * beta[..., None]
    assert torch.allclose(lhs, rhs, atol=1e-10)


@pytest.mark.parametrize("arch", list(ArchKind))
def test_forward_shape_and_determinism(arch):
    m = small(arch)
    x = inputs(3)
    with torch.no_grad():
        y1, y2 = m(*x), m(*x)
    assert y1.shape == (3,)
    assert torch.equal(y1, y2)


@pytest.mark.parametrize("arch", list(ArchKind))
def test_batch_size_invariance(arch):
    m = small(arch)
    n, o, c = inputs(4)
    with torch.no_grad():
        batched = m(n, o, c)
        single = torch.stack([m(n[i:i + 1], o[i:i + 1], c[i:i + 1])[0] for i in range(4)])
    assert torch.allclose(batched, single, atol=1e-6)


def test_modality_mismatch():
    n, o, c = inputs(1)
    with pytest.raises(ConfigError, match="numeric"):
        small("numeric_only")(None, o, c)
    with pytest.raises(ConfigError, match="stacks"):
        small("late_film")(n, o, None)
    small("image_only")(None, o, c)


def test_seeded_init_and_identity_gate_bias():
    a = M.build_model(ModelSpec("hier_film", SMALL, SHAPE16), seed=3)
    b = M.build_model(ModelSpec("hier_film", SMALL, SHAPE16), seed=3)
    c = M.build_model(ModelSpec("hier_film", SMALL, SHAPE16), seed=4)
    for (k, pa), pb in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(pa, pb), k
    assert not torch.equal(a.head.fc1.weight, c.head.fc1.weight)
    assert len(a.projectors()) == 8  # four (gamma, beta) projector pairs per stream
    for p in a.projectors():
        assert torch.all(p.gamma.bias == 1) and torch.all(p.beta.bias == 0)


def late_film_identity_gap(n_samples=20, shape=SHAPE16, channels=SMALL) -> float:
    """Max |LateFilm(gamma=1, beta=0) - ungated dual CNN| over random samples."""
    gated = M.build_model(ModelSpec("late_film", channels, shape), seed=0).eval()
    with torch.no_grad():
        gated.film.gamma.weight.zero_()
        gated.film.beta.weight.zero_()
    plain = M.CPGAModel(ModelSpec("late_film", channels, shape, gate=False)).eval()
    plain.load_state_dict({k: v for k, v in gated.state_dict().items() if not k.startswith("film.")})
    n, o, c = inputs(n_samples, shape, seed=11)
    with torch.no_grad():
        return float((gated(n, o, c) - plain(n, o, c)).abs().max())


def test_late_film_identity_equals_ungated():
    assert late_film_identity_gap() <= 1e-6


def test_attention_zero_value_passthrough():
    m = small("attention_fusion")
    e = m.attn.embed_dim
    with torch.no_grad():
        m.attn.in_proj_weight[2 * e:].zero_()
        m.attn.in_proj_bias[2 * e:].zero_()
        m.attn.out_proj.bias.zero_()
    keep = {}
    with torch.no_grad():
        m(*inputs(3), internals=keep)
    assert torch.equal(keep["f_refined"], keep["f_visual"])
    assert keep["f_visual"].shape == (3, 256)


def expected_counts(ch, shape=(32, 32, 32)) -> dict[str, int]:
    """Closed-form parameter counts, written out independently of the modules."""
    lin = lambda i, o: i * o + o
    conv = lambda i, o, k=3: k ** 3 * i * o + o
    cnn = sum(conv(a, b) + 2 * b for a, b in zip((1,) + tuple(ch[:-1]), ch))
    cells = int(np.prod([s // 16 for s in shape]))
    num = lin(6, 64) + lin(64, 32)
    flat = cnn + lin(ch[-1] * cells, 128)
    spatial_head = conv(2 * ch[-1], 64, 1) + lin(64 * cells, 128) + lin(128, 1)
    return {
        "numeric_only": num + lin(32, 16) + lin(16, 1),
        "image_only": 2 * flat + lin(256, 128) + lin(128, 1),
        "concat_fusion": num + 2 * flat + lin(288, 128) + lin(128, 1),
        "attention_fusion": num + 2 * flat + lin(32, 256) + 4 * lin(256, 256) + lin(288, 128) + lin(128, 1),
        "late_film": num + 2 * cnn + 2 * lin(32, 2 * ch[-1]) + spatial_head,
        "hier_film": num + 2 * cnn + 2 * sum(2 * lin(32, c) for c in ch) + spatial_head,
    }


@pytest.mark.parametrize("ch", [M.PAPER_CHANNELS, M.DESK_CHANNELS])
def test_parameter_counts_match_closed_form(ch):
    assert M.parameter_counts(ch) == expected_counts(ch)


def test_parameter_count_order_as_built():
    # the flatten layers of the vector-fusion models dominate at 2^3 encoded cells
    counts = M.parameter_counts()
    order = sorted(counts, key=counts.get, reverse=True)
    assert order == ["attention_fusion", "concat_fusion", "image_only", "hier_film", "late_film", "numeric_only"]
    assert counts["hier_film"] > counts["late_film"]


def test_input_gradient_matches_finite_differences():
    rel = saliency_fd_error(small("late_film").double())
    assert rel < 1e-3


def saliency_fd_error(model, n_voxels=10, eps=1e-6, seed=5) -> float:
    """Worst relative error between autograd and central differences at random voxels (float64)."""
    n, o, c = (t.double() for t in inputs(1, tuple(model.spec.input_shape), seed=seed))
    o.requires_grad_(True)
    model(n, o, c).sum().backward()
    grad = o.grad[0, 0]
    rng = np.random.default_rng(seed)
    worst = 0.0
    shape = grad.shape
    with torch.no_grad():
        for _ in range(n_voxels):
            idx = tuple(int(rng.integers(s)) for s in shape)
            up, dn = o.detach().clone(), o.detach().clone()
            up[(0, 0) + idx] += eps
            dn[(0, 0) + idx] -= eps
            fd = (model(n, up, c) - model(n, dn, c)).item() / (2 * eps)
            g = grad[idx].item()
            worst = max(worst, abs(fd - g) / max(abs(g), abs(fd), 1e-8))
    return worst


def test_checkpoint_roundtrip_byte_identical(tmp_path):
    m = small("hier_film")
    ck = M.Checkpoint.from_model(m, arch="hier_film", epoch=3, metrics={"r2": 0.5})
    ck.save(tmp_path / "a.ckpt")
    back = M.Checkpoint.load(tmp_path / "a.ckpt")
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.metadata["epoch"] == 3 and back.spec == m.spec
    x = inputs(2)
    with torch.no_grad():
        assert torch.equal(back.to_model()(*x), m(*x))
    assert (tmp_path / "a.ckpt").read_bytes()[:8] == M.MAGIC


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError, match="magic"):
        M.Checkpoint.from_bytes(b"not a checkpoint")


def test_describe_table():
    text = M.describe(ModelSpec("late_film", SMALL, (32, 32, 32)))
    assert "film.gamma" in text and "(1, 32, 2, 2, 2)" not in text
    assert f"total parameters: {expected_counts(SMALL)['late_film']}" in text
    assert "attn" in M.describe(ModelSpec("attention_fusion", SMALL))


def test_output_affine_and_checkpoint():
    m = small("concat_fusion")
    x = inputs(3)
    with torch.no_grad():
        raw = m(*x)
        m.set_output_affine(0.8, 0.1)
        assert torch.allclose(m(*x), 0.8 + 0.1 * raw, atol=1e-7)
    back = M.Checkpoint.from_bytes(M.Checkpoint.from_model(m).to_bytes()).to_model()
    assert back.out_shift.item() == pytest.approx(0.8) and back.out_scale.item() == pytest.approx(0.1)
    with pytest.raises(ConfigError):
        m.set_output_affine(0.0, 0.0)

