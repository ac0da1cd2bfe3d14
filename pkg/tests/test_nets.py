import numpy as np
import pytest
import torch

from cxrseg.nets import (
    AttentionGate,
    CheckpointError,
    CriticConfig,
    UNetConfig,
    build_critic,
    build_generator,
    count_parameters,
    load_weights,
    model_from_checkpoint,
    read_checkpoint,
    save_weights,
)

SMALL = UNetConfig(input_size=64, depth=3, base_channels=4, num_classes=3)


def upsample2x_reference(a):
    """Bilinear 2x upsampling with half-pixel centres, edge-clamped, for [H, W] arrays."""
    def axis(n_in):
        pos = np.maximum((np.arange(2 * n_in) + 0.5) / 2 - 0.5, 0.0)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, wy = axis(a.shape[0])
    x0, x1, wx = axis(a.shape[1])
    out = np.empty((2 * a.shape[0], 2 * a.shape[1]))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            top = a[y0[i], x0[j]] * (1 - wx[j]) + a[y0[i], x1[j]] * wx[j]
            bottom = a[y1[i], x0[j]] * (1 - wx[j]) + a[y1[i], x1[j]] * wx[j]
            out[i, j] = top * (1 - wy[i]) + bottom * wy[i]
    return out


def gate_reference(gate, skip, gating):
    """Step-by-step numpy evaluation of one attention gate on a single sample."""
    w_theta = gate.theta.weight.detach().numpy()[:, :, 0, 0]
    w_phi = gate.phi.weight.detach().numpy()[:, :, 0, 0]
    b_phi = gate.phi.bias.detach().numpy()
    w_psi = gate.psi.weight.detach().numpy()[0, :, 0, 0]
    b_psi = gate.psi.bias.detach().numpy()[0]
    x = skip[0].numpy().astype(np.float64)
    g = gating[0].numpy().astype(np.float64)
    sub = x[:, ::2, ::2]
    theta = np.einsum("oc,chw->ohw", w_theta, sub)
    phi = np.einsum("oc,chw->ohw", w_phi, g) + b_phi[:, None, None]
    q = np.maximum(theta + phi, 0.0)
    logits = np.einsum("c,chw->hw", w_psi, q) + b_psi
    alpha = upsample2x_reference(1.0 / (1.0 + np.exp(-logits)))
    return x * alpha[None], alpha


def random_gate(seed=0):
    torch.manual_seed(seed)
    gate = AttentionGate(6, 10, 4)
    with torch.no_grad():
        for p in gate.parameters():
            p.normal_(0, 0.7)
    return gate


def test_gate_matches_reference_graph():
    gate = random_gate()
    skip = torch.randn(1, 6, 8, 8)
    gating = torch.randn(1, 10, 4, 4)
    out = gate(skip, gating)
    expected, alpha = gate_reference(gate, skip, gating)
    np.testing.assert_allclose(out.detach().numpy()[0], expected, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(gate.coefficients.numpy()[0, 0], alpha, rtol=1e-5, atol=1e-6)


def test_gate_forced_open_is_identity():
    gate = random_gate()
    with torch.no_grad():
        gate.psi.weight.zero_()
        gate.psi.bias.fill_(100.0)
    skip = torch.randn(2, 6, 8, 8)
    assert torch.equal(gate(skip, torch.randn(2, 10, 4, 4)), skip)


def test_gate_starts_half_open():
    gate = AttentionGate(3, 5, 2)
    gate(torch.randn(1, 3, 8, 8), torch.randn(1, 5, 4, 4))
    assert torch.all(gate.coefficients == 0.5)


def test_gate_rejects_mismatched_inputs():
    gate = AttentionGate(3, 5, 2)
    with pytest.raises(ValueError):
        gate(torch.randn(1, 4, 8, 8), torch.randn(1, 5, 4, 4))
    with pytest.raises(ValueError):
        gate(torch.randn(1, 3, 8, 8), torch.randn(1, 5, 8, 8))


def perturbed(model, seed=0):
    """Random non-trivial weights, including the zero-initialized gate projections."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "psi" in name:
                p.copy_(torch.randn(p.shape, generator=gen) * 0.5)
    return model.eval()


@pytest.mark.parametrize("size", [64, 32])
def test_generator_shapes_and_simplex(size):
    model = perturbed(build_generator(SMALL))
    out = model(torch.randn(2, 1, size, size))
    assert out.shape == (2, 3, size, size)
    assert torch.allclose(out.sum(dim=1), torch.ones(2, size, size), atol=1e-6)
    for alpha in model.attention_maps():
        assert alpha.min() > 0 and alpha.max() < 1


def test_generator_rejects_bad_input():
    model = build_generator(SMALL)
    with pytest.raises(ValueError):
        model(torch.randn(1, 1, 60, 60))
    with pytest.raises(ValueError):
        UNetConfig(input_size=100, depth=3)
    with pytest.raises(ValueError):
        UNetConfig(num_classes=1)


def test_parameter_audit():
    with_gates = build_generator(SMALL)
    plain = build_generator(UNetConfig(**{**SMALL.__dict__, "attention": False}))
    widths = [SMALL.base_channels * 2 ** i for i in range(SMALL.depth + 1)]
    gate_params = 0
    for level in range(SMALL.depth):
        skip, coarse = widths[level], widths[level + 1]
        inter = skip // 2
        gate_params += skip * inter + (coarse * inter + inter) + (inter + 1)
    assert count_parameters(with_gates) - count_parameters(plain) == gate_params
    assert sum(count_parameters(g) for g in with_gates.gates) == gate_params


def test_critic_range_and_batch():
    cfg = CriticConfig(num_classes=3, depth=3, base_channels=4)
    critic = build_critic(cfg).eval()
    masks = torch.softmax(torch.randn(5, 3, 32, 32), dim=1)
    images = torch.randn(5, 1, 32, 32)
    scores = critic(masks, images)
    assert scores.shape == (5,)
    assert torch.all((scores > 0) & (scores < 1))
    single = torch.stack([critic(masks[i:i + 1], images[i:i + 1])[0] for i in range(5)])
    assert torch.allclose(scores, single, atol=1e-6)
    with pytest.raises(ValueError):
        critic(masks)
    unconditioned = build_critic(CriticConfig(num_classes=3, image_conditioned=False, depth=2, base_channels=4))
    assert unconditioned(masks).shape == (5,)


def test_checkpoint_round_trip(tmp_path):
    model = perturbed(build_generator(SMALL), seed=3)
    x = torch.randn(1, 1, 64, 64)
    expected = model(x)
    path = tmp_path / "g.pt"
    save_weights(model, path, extra={"note": "x"})
    torch.manual_seed(99)
    fresh = build_generator(SMALL).eval()
    assert load_weights(fresh, path) == {"note": "x"}
    assert torch.equal(fresh(x), expected)
    restored, extra = model_from_checkpoint(path)
    assert torch.equal(restored.eval()(x), expected) and extra["note"] == "x"


def test_checkpoint_mismatches(tmp_path):
    path = tmp_path / "g.pt"
    save_weights(build_generator(SMALL), path)
    bigger = build_generator(UNetConfig(input_size=64, depth=3, base_channels=8))
    with pytest.raises(CheckpointError):
        load_weights(bigger, path)

    # a header whose hash disagrees with the model is rejected even if tensors fit
    payload = read_checkpoint(path)
    payload["config_hash"] = "0" * 64
    torch.save(payload, tmp_path / "tampered.pt")
    with pytest.raises(CheckpointError):
        load_weights(build_generator(SMALL), tmp_path / "tampered.pt")

    (tmp_path / "corrupt.pt").write_bytes(b"\x00garbage")
    with pytest.raises(CheckpointError):
        load_weights(build_generator(SMALL), tmp_path / "corrupt.pt")


def test_optimizer_state_round_trip(tmp_path):
    model = build_generator(SMALL)
    opt = torch.optim.SGD(model.parameters(), lr=0.1, momentum=0.9)
    model(torch.randn(2, 1, 64, 64)).sum().backward()
    opt.step()
    save_weights(model, tmp_path / "g.pt", opt)
    fresh = build_generator(SMALL)
    fresh_opt = torch.optim.SGD(fresh.parameters(), lr=0.1, momentum=0.9)
    load_weights(fresh, tmp_path / "g.pt", fresh_opt)
    a = [s["momentum_buffer"] for s in opt.state_dict()["state"].values()]
    b = [s["momentum_buffer"] for s in fresh_opt.state_dict()["state"].values()]
    assert all(torch.equal(x, y) for x, y in zip(a, b))
