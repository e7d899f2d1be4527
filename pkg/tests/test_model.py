import copy

import pytest
import torch
import torch.nn.functional as F

from backdoor_excl.errors import ContractViolation
from backdoor_excl.model import (ModelConfig, batched_predict, build_model, load_checkpoint,
                                 predict_from_logits, save_checkpoint)

SMALL = ModelConfig(input_shape=(3, 8, 8), num_classes=3, conv_blocks=((4, 3, 2), (6, 3, 2)), seed=1)


def test_feature_dim_from_last_block():
    m = build_model(ModelConfig())
    assert m.feature_dim == 128
    assert m.features(torch.rand(2, 3, 16, 16)).shape == (2, 128)


def test_forward_is_head_of_features():
    m = build_model(ModelConfig()).eval()
    x = torch.rand(100, 3, 16, 16)
    torch.testing.assert_close(m(x), m.head(m.features(x)), rtol=0, atol=1e-6)


def test_zero_head_gives_uniform_softmax():
    m = build_model(SMALL).eval()
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.zero_()
    logits = m(torch.rand(5, 3, 8, 8))
    assert torch.all(logits == 0)
    torch.testing.assert_close(F.softmax(logits, 1), torch.full((5, 3), 1 / 3))


def test_zero_stack_zero_input_gives_zero_features():
    m = build_model(SMALL).eval()
    with torch.no_grad():
        for mod in m.extractor.modules():
            if isinstance(mod, torch.nn.Conv2d):
                mod.weight.zero_()
                mod.bias.zero_()
    assert torch.all(m.features(torch.zeros(2, 3, 8, 8)) == 0)


def test_identical_inputs_identical_features():
    m = build_model(SMALL).eval()
    x = torch.rand(1, 3, 8, 8)
    assert torch.equal(m.features(torch.cat([x, x]))[0], m.features(torch.cat([x, x]))[1])


def test_seeded_init_is_deterministic():
    a, b = build_model(SMALL), build_model(SMALL)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


@pytest.mark.parametrize("logits, want", [([0.1, 0.9, 0.3], 1), ([0.5, 0.5, 0.5], 0), ([0.2, 0.7, 0.7], 1)])
def test_argmax_and_tie_rule(logits, want):
    assert int(predict_from_logits(torch.tensor([logits]))[0]) == want


def test_predict_matches_forward_argmax():
    m = build_model(ModelConfig()).eval()
    x = torch.rand(1000, 3, 16, 16)
    logits = m(x)
    want = [max(range(4), key=lambda k: (row[k].item(), -k)) for row in logits]
    assert m.predict(x).tolist() == want
    assert batched_predict(m, x, batch_size=128).tolist() == want


def test_shape_mismatch():
    m = build_model(SMALL)
    with pytest.raises(ContractViolation, match="width"):
        m(torch.rand(1, 3, 8, 9))
    with pytest.raises(ContractViolation):
        m(torch.rand(3, 8, 8))


def test_checkpoint_roundtrip(tmp_path):
    m = build_model(ModelConfig()).eval()
    with torch.no_grad():
        m.extractor[1].running_mean.add_(0.3)
    save_checkpoint(m, tmp_path / "c.npz", metadata={"note": "x"})
    back, meta = load_checkpoint(tmp_path / "c.npz")
    x = torch.rand(16, 3, 16, 16)
    torch.testing.assert_close(back(x), m(x), rtol=0, atol=1e-6)
    assert meta == {"note": "x"}
    assert back.config == m.config


def test_checkpoint_rejects_foreign_npz(tmp_path):
    import numpy as np

    np.savez(tmp_path / "f.npz", a=np.zeros(2))
    with pytest.raises(ContractViolation):
        load_checkpoint(tmp_path / "f.npz")


def _central_fd(fn, tensor, index, h):
    orig = tensor[index].item()
    tensor[index] = orig + h
    up = fn().item()
    tensor[index] = orig - h
    down = fn().item()
    tensor[index] = orig
    return (up - down) / (2 * h)


def test_cross_entropy_gradients_match_finite_differences():
    """float32 autograd against a float64 central-difference oracle on the same weights."""
    torch.manual_seed(0)
    m = build_model(SMALL).eval()
    m64 = copy.deepcopy(m).double()
    x = torch.rand(4, 3, 8, 8)
    y = torch.tensor([0, 1, 2, 1])
    x.requires_grad_(True)
    F.cross_entropy(m(x), y).backward()

    x64 = x.detach().double()
    params64 = dict(m64.named_parameters())
    probes = []
    gen = torch.Generator().manual_seed(0)
    names = [n for n, _ in m.named_parameters()]
    for i in range(8):
        name = names[i % len(names)]
        p = dict(m.named_parameters())[name]
        flat = int(torch.randint(p.numel(), (1,), generator=gen))
        probes.append((name, flat))
    for name, flat in probes:
        p32 = dict(m.named_parameters())[name]
        p64 = params64[name]
        index = tuple(int(i) for i in torch.unravel_index(torch.tensor(flat), p64.shape))
        with torch.no_grad():
            fd = _central_fd(lambda: F.cross_entropy(m64(x64), y), p64.data, index, 1e-6)
        g = p32.grad[index].item()
        assert abs(g - fd) <= 1e-3 * max(abs(fd), 1e-3), (name, index, g, fd)
    for index in [(0, 0, 3, 3), (2, 1, 5, 0)]:
        with torch.no_grad():
            fd = _central_fd(lambda: F.cross_entropy(m64(x64), y), x64, index, 1e-6)
        g = x.grad[index].item()
        assert abs(g - fd) <= 1e-3 * max(abs(fd), 1e-3), (index, g, fd)
