import io

import numpy as np
import pytest

from rhythmid import tensor_core as tc
from rhythmid.fusion import (
    FusionAssembly,
    XVectorBaseline,
    XVectorError,
    XVectorTable,
    fused_forward,
    load_xvectors,
    preflight,
    write_xvectors,
    xvector_baseline_forward,
)
from rhythmid.metrics import predict
from rhythmid.rhythm_encoder import RhythmEncoderConfig, init_model, make_batch
from rhythmid.tensor_core import Adam, Tensor, backward


def xvec_text(dim, rows, rng):
    lines = [f"dim\t{dim}"]
    for name, n in rows:
        lines.append(name + "\t" + "\t".join(f"{v:.6f}" for v in rng.normal(size=n)))
    return "\n".join(lines) + "\n"


def test_load_dim_512_fixture(tmp_path):
    path = tmp_path / "x.tsv"
    path.write_text(xvec_text(512, [("u1", 512), ("u2", 512), ("u3", 512)], np.random.default_rng(0)))
    table = load_xvectors(path)
    assert table.dim == 512 and len(table) == 3 and table.entries["u2"].shape == (512,)


def test_empty_body_is_an_empty_table():
    table = load_xvectors(io.StringIO("dim\t16\n"))
    assert table.dim == 16 and len(table) == 0


@pytest.mark.parametrize(
    "body,needle",
    [
        ("dim\t4\nu1\t1\t2\t3\t4\nu2\t1\t2\t3\n", "line 3"),
        ("dim\t2\nu1\t1\t2\nu1\t3\t4\n", "duplicate"),
        ("dim\t2\nu1\t1\tx\n", "non-numeric"),
        ("dim\t2\nu1\t1\tnan\n", "non-finite"),
        ("u1\t1\t2\n", "header"),
    ],
)
def test_load_errors(body, needle):
    with pytest.raises(XVectorError, match=needle):
        load_xvectors(io.StringIO(body))


def test_511_values_under_dim_512_names_the_line():
    text = xvec_text(512, [("a", 512), ("b", 511)], np.random.default_rng(1))
    with pytest.raises(XVectorError, match="line 3"):
        load_xvectors(io.StringIO(text))


def test_write_read_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    table = XVectorTable(5, {f"u{i}": rng.normal(size=5) for i in range(4)})
    write_xvectors(tmp_path / "x.tsv", table)
    back = load_xvectors(tmp_path / "x.tsv")
    assert list(back.entries) == list(table.entries)
    assert all(np.array_equal(back.entries[k], table.entries[k]) for k in table.entries)


def test_stack_names_missing_id():
    table = XVectorTable(2, {"a": np.zeros(2)})
    with pytest.raises(XVectorError, match="'zz'"):
        table.stack(["a", "zz"])
    with pytest.raises(XVectorError, match="zz"):
        preflight(["a", "zz"], table)
    preflight(["a"], table)


def assembly(seed=0, d_model=16, dim_x=12, d_proj=8, n_speakers=5, fuse="concat"):
    cfg = RhythmEncoderConfig(vocab_size=10, n_speakers=n_speakers, d_model=d_model, n_heads=2, n_layers=1,
                              ffn_dim=16, dropout_rate=0.0, max_len=32)
    rng = np.random.default_rng(seed)
    return FusionAssembly.create(init_model(cfg, rng, dtype=np.float64), dim_x, n_speakers, rng, d_proj, fuse)


def inputs(seed=1, n=3, dim_x=12):
    rng = np.random.default_rng(seed)
    seqs = [rng.integers(1, 10, size=int(rng.integers(3, 9))) for _ in range(n)]
    return seqs, rng.normal(size=(n, dim_x))


def test_reference_configuration_shapes():
    cfg = RhythmEncoderConfig(vocab_size=10, n_speakers=40, n_layers=1, max_len=32)
    rng = np.random.default_rng(0)
    a = FusionAssembly.create(init_model(cfg, rng), 512, 40, rng)
    assert a.own["head.weight"].shape == (256, 40)
    seqs, x = inputs(dim_x=512, n=4)
    assert fused_forward(a, make_batch(seqs), x).shape == (4, 40)
    assert "rhythm.embedding" in a.parameters() and "fusion.proj_x.weight" in a.parameters()


def test_sum_fusion_shapes():
    a = assembly(fuse="sum")
    seqs, x = inputs()
    assert a.own["head.weight"].shape == (8, 5)
    assert a.logits(make_batch(seqs), x).shape == (3, 5)


def test_xvector_batch_mismatch():
    a = assembly()
    seqs, x = inputs()
    with pytest.raises(XVectorError):
        a.logits(make_batch(seqs), x[:, :5])


def test_stream_isolation():
    seqs, x = inputs()
    a = assembly()
    a.own["proj_r.weight"].data[...] = 0
    base = a.logits(make_batch(seqs), x).data
    rng = np.random.default_rng(7)
    other = [rng.integers(1, 10, size=len(s) + 2) for s in seqs]
    assert np.array_equal(a.logits(make_batch(other), x).data, base)

    b = assembly()
    b.own["proj_x.weight"].data[...] = 0
    base = b.logits(make_batch(seqs), x).data
    assert np.array_equal(b.logits(make_batch(seqs), rng.normal(size=x.shape)).data, base)


def test_gradient_reaches_rhythm_embedding():
    a = assembly()
    seqs, x = inputs()
    backward(tc.cross_entropy(a.logits(make_batch(seqs), x), [0, 1, 2]))
    assert np.abs(a.rhythm.params["embedding"].grad).max() > 0
    assert np.abs(a.own["proj_x.weight"].grad).max() > 0


def test_joint_training_step():
    a = assembly()
    seqs, x = inputs()
    x_before = x.copy()
    params = a.parameters()
    before = {k: p.data.copy() for k, p in params.items()}
    opt = Adam(params)
    backward(tc.cross_entropy(a.logits(make_batch(seqs), x, True, np.random.default_rng(0)), [0, 1, 2]))
    opt.step(1e-2)
    changed = {k for k, p in params.items() if not np.array_equal(p.data, before[k])}
    assert {"fusion.proj_x.weight", "fusion.proj_r.weight"} <= changed
    assert any(k.startswith("rhythm.") for k in changed)
    assert np.array_equal(x, x_before)


def test_baseline_argmax_on_separated_inputs():
    head = XVectorBaseline({"head.weight": Tensor(np.eye(2)), "head.bias": Tensor(np.zeros(2))})
    logits = xvector_baseline_forward(head, np.array([[3.0, -1.0], [-2.0, 4.0]]))
    assert predict(logits.data).tolist() == [0, 1]


def test_baseline_shapes_and_errors():
    head = XVectorBaseline.create(512, 7, np.random.default_rng(0))
    assert head.logits(np.zeros((4, 512))).shape == (4, 7)
    with pytest.raises(XVectorError):
        head.logits(np.zeros((4, 511)))
