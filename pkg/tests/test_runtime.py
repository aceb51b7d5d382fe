import math
import struct

import numpy as np
import pytest
import torch
from torch import nn

from src.config import TrainingConfig
from src.errors import (
    DimensionMismatchError,
    ModelFormatError,
    NonFiniteGradientError,
    TapeInvalidatedError,
)
from src.runtime import (
    MAGIC,
    UNK,
    NeuralModel,
    Vocab,
    apply_pretrained,
    backward,
    finite_diff_check,
    forward,
    load_params,
    load_word_vectors,
    make_optimizer,
    optimize_step,
    record,
    save_params,
    set_epoch_learning_rate,
)


class Linear(NeuralModel):
    KIND = "linear"

    def __init__(self, hparams, vocabs):
        super().__init__(hparams, vocabs)
        self.proj = nn.Linear(int(hparams["d_in"]), int(hparams["d_out"]), bias=bool(hparams.get("bias", True)))
        self.unused = nn.Linear(2, 2)
        self.finish_init()

    def forward(self, x):
        return self.drop(self.proj(torch.as_tensor(x, dtype=self.dtype)))


class Lookup(NeuralModel):
    KIND = "lookup"

    def __init__(self, hparams, vocabs):
        super().__init__(hparams, vocabs)
        self.embed = nn.Embedding(len(vocabs["words"]), 3)
        self.finish_init()

    def forward(self, ids):
        return self.embed(torch.tensor(ids, dtype=torch.long))


class Recurrent(NeuralModel):
    KIND = "recurrent"

    def __init__(self, hparams, vocabs):
        super().__init__(hparams, vocabs)
        self.lstm = nn.LSTM(1, 1, batch_first=True, bias=False)
        self.finish_init()

    def forward(self, xs):
        out, _ = self.lstm(torch.tensor([[[x] for x in xs]], dtype=self.dtype))
        return out[0, :, 0]


def linear(d_in=3, d_out=2, **extra):
    return Linear({"d_in": d_in, "d_out": d_out, "seed": 3, **extra}, {})


def test_vocab_reserves_unk():
    v = Vocab.build(["b", "a", "b", "c"], min_freq=1)
    assert v.item(0) == UNK
    assert v.to_list() == [UNK, "b", "a", "c"]
    assert v.index("zzz") == 0
    assert Vocab.build(["b", "a", "b"], min_freq=2).to_list() == [UNK, "b"]


def test_vocab_list_round_trip():
    v = Vocab(["x", "y"])
    assert Vocab.from_list(v.to_list()) == v
    with pytest.raises(ModelFormatError):
        Vocab.from_list(["x", UNK])
    with pytest.raises(ModelFormatError):
        Vocab.from_list([UNK, "x", "x"])


def test_same_seed_same_weights():
    a, b = linear(), linear()
    assert torch.equal(a.proj.weight, b.proj.weight)
    assert torch.count_nonzero(a.proj.bias) == 0


def test_zero_weights_give_zero_output():
    m = linear()
    with torch.no_grad():
        m.proj.weight.zero_()
    out, _ = forward(m, [1.0, -2.0, 3.0])
    assert torch.equal(out, torch.zeros(2))


def test_identity_weights_return_input():
    m = linear(d_in=3, d_out=3)
    with torch.no_grad():
        m.proj.weight.copy_(torch.eye(3))
    out, _ = forward(m, [0.5, -1.0, 2.0])
    np.testing.assert_allclose(out.detach().numpy(), [0.5, -1.0, 2.0])


def test_two_step_recurrence_by_hand():
    m = Recurrent({"seed": 1}, {})
    with torch.no_grad():
        m.lstm.weight_ih_l0.fill_(1.0)
        m.lstm.weight_hh_l0.fill_(0.5)
    out, _ = forward(m, [1.0, -1.0])

    def sigmoid(z):
        return 1.0 / (1.0 + math.exp(-z))

    c1 = sigmoid(1.0) * math.tanh(1.0)
    h1 = sigmoid(1.0) * math.tanh(c1)
    z = -1.0 + 0.5 * h1
    c2 = sigmoid(z) * c1 + sigmoid(z) * math.tanh(z)
    h2 = sigmoid(z) * math.tanh(c2)
    np.testing.assert_allclose(out.detach().numpy(), [h1, h2], rtol=1e-5)


def test_backward_of_sum_hits_used_rows_only():
    m = Lookup({"seed": 1}, {"words": Vocab(["a", "b", "c", "d"])})
    _, tape = forward(m, [1, 3])
    grads = backward(tape)
    expected = torch.zeros(5, 3)
    expected[1] = 1.0
    expected[3] = 1.0
    assert torch.equal(grads["embed.weight"], expected)


def test_untouched_parameters_get_zero_gradient():
    m = linear()
    _, tape = forward(m, [1.0, 2.0, 3.0])
    grads = backward(tape)
    assert torch.equal(grads["unused.weight"], torch.zeros(2, 2))
    assert set(grads) == {name for name, _ in m.named_parameters()}


def test_quadratic_loss_gradient():
    m = linear(bias=False)
    x = torch.tensor([1.0, -2.0, 0.5])
    out, tape = forward(m, x)
    grads = backward(tape, loss_gradient=out.detach())
    expected = torch.outer(m.proj.weight.detach() @ x, x)
    np.testing.assert_allclose(grads["proj.weight"].numpy(), expected.numpy(), rtol=1e-5, atol=1e-7)


def test_softmax_cross_entropy_gradient():
    m = linear(d_in=3, d_out=4)
    out, _ = forward(m, [0.3, -0.1, 0.7])
    loss = nn.functional.cross_entropy(out.unsqueeze(0), torch.tensor([2]))
    grads = backward(record(m, loss))
    expected = torch.softmax(out.detach(), dim=-1)
    expected[2] -= 1.0
    np.testing.assert_allclose(grads["proj.bias"].numpy(), expected.numpy(), rtol=1e-5, atol=1e-7)


def test_tape_cannot_be_reused():
    m = linear()
    _, tape = forward(m, [1.0, 2.0, 3.0])
    backward(tape)
    with pytest.raises(TapeInvalidatedError):
        backward(tape)


def test_tape_invalidated_by_parameter_update():
    m = linear()
    _, tape = forward(m, [1.0, 2.0, 3.0])
    with torch.no_grad():
        m.proj.weight.add_(1.0)
    with pytest.raises(TapeInvalidatedError):
        backward(tape)


def test_dropout_reproducible_with_seed():
    m = linear(d_in=4, d_out=16, dropout=0.5)
    x = [1.0, 1.0, 1.0, 1.0]
    a, _ = forward(m, x, seed=7, train=True)
    b, _ = forward(m, x, seed=7, train=True)
    c, _ = forward(m, x, seed=8, train=True)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    d, _ = forward(m, x, seed=7, train=False)
    e, _ = forward(m, x, seed=8, train=False)
    assert torch.equal(d, e)


def test_finite_difference_on_linear_model():
    m = linear()
    x = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)

    def loss(model):
        return 0.5 * (model(x) ** 2).sum()

    assert finite_diff_check(m, loss) < 1e-6


def test_finite_difference_epsilon_range():
    m = linear()
    with pytest.raises(ValueError):
        finite_diff_check(m, lambda model: model([1.0, 2.0, 3.0]).sum(), epsilon=1e-2)


def set_grads(m, value):
    for p in m.parameters():
        p.grad = torch.full_like(p, value)


def test_zero_gradient_leaves_parameters():
    m = linear()
    before = {k: v.clone() for k, v in m.state_dict().items()}
    set_grads(m, 0.0)
    optimize_step(m, make_optimizer(m, TrainingConfig(learning_rate=0.1)), clip_norm=5.0)
    for k, v in m.state_dict().items():
        assert torch.equal(v, before[k])


def test_unit_gradient_moves_each_coordinate_by_lr():
    m = linear()
    before = m.proj.weight.detach().clone()
    set_grads(m, 1.0)
    optimize_step(m, make_optimizer(m, TrainingConfig(learning_rate=0.1)), clip_norm=1e6)
    np.testing.assert_allclose((before - m.proj.weight.detach()).numpy(), np.full((2, 3), 0.1), rtol=1e-5)


def test_gradient_clipping_scales_update():
    m = Linear({"d_in": 1, "d_out": 1, "bias": False, "seed": 1}, {})
    for p in m.parameters():
        p.grad = torch.zeros_like(p)
    m.proj.weight.grad = torch.full((1, 1), 100.0)
    before = float(m.proj.weight)
    norm = optimize_step(m, make_optimizer(m, TrainingConfig(learning_rate=1.0)), clip_norm=5.0)
    assert norm == pytest.approx(100.0)
    assert before - float(m.proj.weight) == pytest.approx(5.0, rel=1e-5)


def test_non_finite_gradient_aborts_update():
    m = linear()
    before = {k: v.clone() for k, v in m.state_dict().items()}
    set_grads(m, 1.0)
    m.proj.bias.grad = torch.tensor([float("nan"), 0.0])
    with pytest.raises(NonFiniteGradientError) as excinfo:
        optimize_step(m, make_optimizer(m, TrainingConfig()), clip_norm=5.0)
    assert excinfo.value.tensor_name == "proj.bias"
    for k, v in m.state_dict().items():
        assert torch.equal(v, before[k])


def test_learning_rate_decay():
    m = linear()
    cfg = TrainingConfig(learning_rate=0.1, learning_rate_decay=0.05)
    opt = make_optimizer(m, cfg)
    assert set_epoch_learning_rate(opt, cfg, 0) == pytest.approx(0.1)
    assert set_epoch_learning_rate(opt, cfg, 10) == pytest.approx(0.1 / 1.5)
    assert opt.param_groups[0]["lr"] == pytest.approx(0.1 / 1.5)


def test_save_load_round_trip(tmp_path):
    m = Lookup({"seed": 5}, {"words": Vocab(["a", "b"])})
    path = str(tmp_path / "m.twpm")
    m.save(path)
    loaded = Lookup.load(path)
    assert loaded.vocabs == m.vocabs
    assert loaded.hparams == m.hparams
    for k, v in m.state_dict().items():
        assert torch.equal(loaded.state_dict()[k], v)


def test_load_rejects_other_kind(tmp_path):
    path = str(tmp_path / "m.twpm")
    Lookup({"seed": 5}, {"words": Vocab(["a"])}).save(path)
    with pytest.raises(ModelFormatError):
        Linear.load(path)


def test_load_rejects_truncated_file(tmp_path):
    path = tmp_path / "m.twpm"
    Lookup({"seed": 5}, {"words": Vocab(["a"])}).save(str(path))
    data = path.read_bytes()
    path.write_bytes(data[:-4])
    with pytest.raises(ModelFormatError):
        load_params(str(path))
    path.write_bytes(data + b"\0")
    with pytest.raises(ModelFormatError):
        load_params(str(path))
    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(ModelFormatError):
        load_params(str(path))


def write_raw_model(path, header: bytes, body: bytes = b""):
    path.write_bytes(MAGIC + struct.pack("<I", 1) + struct.pack("<Q", len(header)) + header + body)


@pytest.mark.parametrize("header", [
    b"not json!",
    b"\xff\xfe\xfd",
    b"[1, 2]",
    b'{"kind": "parser"}',
    b'{"kind": "linear", "hparams": {}, "vocabs": {}, "tensors": 3}',
    b'{"kind": "linear", "hparams": {}, "vocabs": {}, "tensors": [{"name": "w"}]}',
    b'{"kind": "linear", "hparams": {}, "vocabs": {}, "tensors": [{"name": "w", "shape": [-1]}]}',
])
def test_load_rejects_corrupt_header(tmp_path, header):
    path = tmp_path / "m.twpm"
    write_raw_model(path, header)
    with pytest.raises(ModelFormatError):
        load_params(str(path))


def test_load_rejects_header_longer_than_file(tmp_path):
    path = tmp_path / "m.twpm"
    path.write_bytes(MAGIC + struct.pack("<I", 1) + struct.pack("<Q", 1 << 40) + b"{}")
    with pytest.raises(ModelFormatError):
        load_params(str(path))


def test_load_reads_handwritten_file(tmp_path):
    path = tmp_path / "m.twpm"
    header = b'{"kind": "linear", "hparams": {}, "vocabs": {}, "tensors": [{"name": "w", "shape": [2]}]}'
    write_raw_model(path, header, struct.pack("<2f", 1.5, -2.0))
    parsed, tensors = load_params(str(path))
    assert parsed["kind"] == "linear"
    np.testing.assert_array_equal(tensors["w"].numpy(), [1.5, -2.0])


def test_load_rejects_wrong_shapes(tmp_path):
    path = str(tmp_path / "m.twpm")
    state = {"proj.weight": torch.zeros(4, 3), "proj.bias": torch.zeros(2),
             "unused.weight": torch.zeros(2, 2), "unused.bias": torch.zeros(2)}
    save_params(path, "linear", {"d_in": 3, "d_out": 2, "seed": 1}, {}, state)
    with pytest.raises(DimensionMismatchError):
        Linear.load(path)


def test_pretrained_vectors(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text("2 3\nhello 1 2 3\nworld 4 5 6\n", encoding="utf-8")
    vectors = load_word_vectors(str(path))
    assert set(vectors) == {"hello", "world"}
    embedding = nn.Embedding(3, 3)
    hits = apply_pretrained(embedding, Vocab(["hello", "other"]), vectors)
    assert hits == 1
    np.testing.assert_allclose(embedding.weight[1].detach().numpy(), [1, 2, 3])
    with pytest.raises(DimensionMismatchError):
        apply_pretrained(nn.Embedding(3, 2), Vocab(["hello"]), vectors)
