import numpy as np
import pytest

from memaudit import trace_io
from memaudit.features import extract_matrix
from memaudit.forest import fixed_heldout_auc
from memaudit.synth import SynthSpec, generate, make_head, middle_transitions
from memaudit.trace import validate_trace


def _spec(**kw):
    base = dict(n_layers=2, n_heads=2, seq_len=12, hidden_dim=8, vocab_size=16,
                n_members=6, n_nonmembers=6, seed=99)
    base.update(kw)
    return SynthSpec(**base)


def test_middle_transitions():
    assert middle_transitions(2) == [0, 1]
    assert middle_transitions(3) == [1]
    assert middle_transitions(4) == [1, 2]
    assert middle_transitions(5) == [2]


def test_generate_valid_and_deterministic(tmp_path):
    spec = _spec()
    m1 = generate(spec, str(tmp_path / "a"))
    m2 = generate(spec, str(tmp_path / "b"))
    assert len(m1) == 12
    assert [e.label for e in m1.entries].count("member") == 6
    for e1, e2 in zip(m1.entries, m2.entries):
        t1 = trace_io.read_trace(trace_io.resolve_trace_path(m1, e1))
        t2 = trace_io.read_trace(trace_io.resolve_trace_path(m2, e2))
        assert validate_trace(t1).ok
        assert np.array_equal(t1.hidden_states, t2.hidden_states)
        assert np.array_equal(t1.attentions, t2.attentions)


def test_generate_neighbors(tmp_path):
    spec = _spec(n_neighbors=4)
    manifest = generate(spec, str(tmp_path / "c"))
    labels = [e.label for e in manifest.entries]
    assert labels.count("neighbor") == 4
    assert manifest.entries[-1].id.startswith("b")


def test_manifest_readable_back(tmp_path):
    spec = _spec()
    generate(spec, str(tmp_path / "d"))
    manifest = trace_io.read_manifest(str(tmp_path / "d" / "manifest.jsonl"))
    assert len(manifest) == 12
    head = trace_io.read_head(str(tmp_path / "d" / "model.mthd"))
    assert head.norm_kind == "identity"


def test_spec_validation():
    with pytest.raises(ValueError):
        _spec(surprise_damping=1.0)
    with pytest.raises(ValueError):
        _spec(spike_rate=-0.1)
    with pytest.raises(ValueError):
        _spec(focus_bonus=-1.0)


def _ks_statistic(a, b):
    allv = np.sort(np.concatenate([a, b]))
    ca = np.searchsorted(np.sort(a), allv, side="right") / a.size
    cb = np.searchsorted(np.sort(b), allv, side="right") / b.size
    return np.abs(ca - cb).max()


def test_null_effects_distributions_match(tmp_path):
    # with all effects zero, member and nonmember features are draws from the
    # same process; two-sample KS on a few coordinates stays under the 1%
    # critical value
    spec = _spec(n_members=100, n_nonmembers=100, surprise_damping=0.0,
                 spike_rate=0.0, focus_bonus=0.0, seq_len=16, seed=7)
    manifest = generate(spec, str(tmp_path / "null"))
    head = trace_io.read_head(str(tmp_path / "null" / "model.mthd"))
    matrix = extract_matrix(manifest, head)
    is_member = np.array([lab == "member" for lab in matrix.labels])
    crit = 1.628 * np.sqrt(2 / 100)  # alpha = 0.01, n1 = n2 = 100
    for name in ("trans0_surprise_mean", "pred1_conf_mean", "attn0_entropy",
                 "ctx1_mean", "pos2_firstlast"):
        j = matrix.names.index(name)
        ks = _ks_statistic(matrix.values[is_member, j], matrix.values[~is_member, j])
        assert ks < crit, (name, ks, crit)


def test_effects_shift_targeted_features(tmp_path):
    # beta focuses attention: member concentration rises; delta damps the
    # middle-transition surprise
    spec = _spec(n_members=60, n_nonmembers=60, surprise_damping=0.4,
                 spike_rate=0.0, focus_bonus=3.0, seed=13)
    manifest = generate(spec, str(tmp_path / "fx"))
    head = trace_io.read_head(str(tmp_path / "fx" / "model.mthd"))
    matrix = extract_matrix(manifest, head)
    is_member = np.array([lab == "member" for lab in matrix.labels])

    j = matrix.names.index("attn0_concentration")
    assert (matrix.values[is_member, j].mean()
            > matrix.values[~is_member, j].mean())
    j = matrix.names.index("trans0_surprise_mean")
    assert (matrix.values[is_member, j].mean()
            < matrix.values[~is_member, j].mean())


def test_auc_increases_with_damping(tmp_path):
    # fast-mode held-out AUC grows along the damping grid, averaged over seeds
    grid_means = []
    for delta in (0.0, 0.15, 0.3):
        scores = []
        for seed in (1, 2, 3):
            spec = SynthSpec(n_layers=2, n_heads=2, seq_len=16, hidden_dim=12,
                             vocab_size=24, n_members=120, n_nonmembers=120,
                             surprise_damping=delta, spike_rate=0.0,
                             focus_bonus=0.0, seed=seed)
            out = str(tmp_path / f"d{delta}_{seed}")
            manifest = generate(spec, out)
            head = trace_io.read_head(out + "/model.mthd")
            matrix = extract_matrix(manifest, head)
            scores.append(fixed_heldout_auc(matrix, seed=420))
        grid_means.append(np.mean(scores))
    assert grid_means[0] < grid_means[1] < grid_means[2]
    assert grid_means[0] < 0.65  # null stays near chance
    assert grid_means[2] > 0.8
