import numpy as np
import pytest
import torch
from hypothesis import given, settings
import hypothesis.strategies as st

from partmotion.annotation_schema import UNKNOWN, PartId, TimedLabel, fill_unknown_gaps
from partmotion.conditioning import (
    ConditionFusion, LabelEmbedder, MaskingConfig, PCAProjector, ToyHashEncoder,
    apply_stochastic_masking, assemble_model_input, build_condition_grid, draw_mask_probability,
    fit_label_pca, fit_pca, make_encoder, mask_batch, stack_grids, training_labels,
)
from partmotion.dataset_synth import label_vocabulary, synthesize_dataset
from partmotion.errors import ConditioningError

ENC = ToyHashEncoder(64)


@pytest.fixture(scope="module")
def projector():
    return fit_label_pca(label_vocabulary(), ENC, 50)


def test_encoder_deterministic_unit():
    a, b = ENC.encode("raise left arm"), ToyHashEncoder(64).encode("raise left arm")
    assert np.array_equal(a, b) and np.linalg.norm(a) == pytest.approx(1.0)
    assert np.isfinite(ENC.encode("")).all()
    assert not np.allclose(ENC.encode("wave"), ENC.encode("nod"))
    assert make_encoder("toy-hash:32").dim == 32
    with pytest.raises(ConditioningError):
        make_encoder("clip")


def test_pca_orthonormal_and_sign(projector):
    C = projector.components
    assert np.abs(C.T @ C - np.eye(50)).max() < 1e-6
    piv = np.argmax(np.abs(C), axis=0)
    assert np.all(C[piv, np.arange(50)] > 0)
    assert projector.encoder_fingerprint == "toy-hash:64"


def test_pca_insufficient_labels():
    with pytest.raises(ConditioningError) as exc:
        fit_label_pca(["a", "b", UNKNOWN], ENC, 3)
    assert exc.value.code == "INSUFFICIENT_LABELS"


def test_pca_exact_subspace_preserves_distances():
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.normal(size=(40, 5)))[0]
    X = rng.normal(size=(30, 5)) @ basis.T
    P = fit_pca(X, 5)
    Y = P.project(X)
    dx = np.linalg.norm(X[:, None] - X[None], axis=-1)
    dy = np.linalg.norm(Y[:, None] - Y[None], axis=-1)
    assert np.abs(dx - dy).max() < 1e-5


def test_pca_full_dim_is_orthogonal():
    X = np.random.default_rng(1).normal(size=(20, 8))
    P = fit_pca(X, 8)
    Xc, Y = X - P.mean, P.project(X)
    assert np.abs(Xc @ Xc.T - Y @ Y.T).max() < 1e-5


def test_pca_rank_one_cloud():
    rng = np.random.default_rng(2)
    d = rng.normal(size=16)
    X = rng.normal(size=(10, 1)) * d + 1e-9 * rng.normal(size=(10, 16))
    P = fit_pca(X, 2)
    assert P.explained_variance[1] / P.explained_variance[0] < 1e-12


def test_pca_reconstruction_non_increasing():
    X = np.random.default_rng(3).normal(size=(30, 12))
    errs = []
    for D in range(1, 13):
        P = fit_pca(X, D)
        rec = P.project(X) @ P.components.T + P.mean
        errs.append(np.square(rec - X).sum())
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))


def test_projector_json_roundtrip(tmp_path, projector):
    projector.save(tmp_path / "p.json")
    back = PCAProjector.load(tmp_path / "p.json")
    assert np.array_equal(back.components, projector.components) and back.encoder_fingerprint == "toy-hash:64"


def test_all_unknown_grid(projector):
    g = build_condition_grid(fill_unknown_gaps(10, 20.0), ENC, projector)
    assert not g.part.any() and not g.action.any() and not g.known.any()
    assert not g.sequence.any() and not g.sequence_known


def test_action_expansion(projector):
    ann = fill_unknown_gaps(4, 20.0, actions=[TimedLabel("walk", 0, 4)])
    g = build_condition_grid(ann, ENC, projector)
    assert np.all(g.action == g.action[0]) and g.action[0].any()
    assert np.allclose(g.action[0], projector.project(ENC.encode("walk")), atol=1e-6)


def test_part_block_matches_direct_evaluation(projector):
    ann = fill_unknown_gaps(4, 20.0, parts={PartId.LEFT_ARM: [TimedLabel("raise left arm", 0, 2)]})
    g = build_condition_grid(ann, ENC, projector)
    block = g.part_block(PartId.LEFT_ARM)
    direct = projector.project(ENC.encode("raise left arm"))
    assert np.allclose(block[:2], direct, atol=1e-6) and not block[2:].any()
    assert g.known[:, PartId.LEFT_ARM].tolist() == [True, True, False, False]
    others = np.delete(g.part.reshape(4, 7, 50), int(PartId.LEFT_ARM), axis=1)
    assert not others.any()


def _zero_consistent(g):
    D = g.pca_dim
    for k in range(7):
        assert not g.part[~g.known[:, k], k * D:(k + 1) * D].any()
    assert not g.action[~g.known[:, 7]].any()


@pytest.fixture(scope="module")
def synth_grids(projector):
    emb = LabelEmbedder(ENC, projector)
    return [build_condition_grid(a, emb) for _, a in synthesize_dataset(20, seed=3)]


def test_grid_zero_consistency_and_purity(synth_grids, projector):
    for g in synth_grids:
        _zero_consistent(g)
    ann = synthesize_dataset(1, seed=3)[0][1]
    a, b = build_condition_grid(ann, ENC, projector), build_condition_grid(ann, ENC, projector)
    assert np.array_equal(a.part, b.part) and np.array_equal(a.action, b.action)


def test_beta_mean():
    rng = np.random.default_rng(0)
    ps = [draw_mask_probability(MaskingConfig(0.5), rng) for _ in range(10_000)]
    assert 0.48 <= np.mean(ps) <= 0.52


def test_rate_clamped():
    assert MaskingConfig(0.0).rate == 0.02 and MaskingConfig(1.0).rate == 0.98
    assert MaskingConfig(0.0).alpha > 0 and MaskingConfig(1.0).beta > 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0))
def test_masking_zeroes_whole_segments(synth_grids, seed, r):
    g = synth_grids[seed % len(synth_grids)]
    m = apply_stochastic_masking(g, MaskingConfig(r), seed)
    _zero_consistent(m)
    D = g.pca_dim
    for col, s, e in g.segments:
        if col == 7:
            continue
        blk = m.part[s:e, col * D:(col + 1) * D]
        # either the whole segment survives or every frame is zero
        assert np.array_equal(blk, g.part[s:e, col * D:(col + 1) * D]) or not blk.any()
    assert not (m.known & ~g.known).any()
    again = apply_stochastic_masking(g, MaskingConfig(r), seed)
    assert np.array_equal(m.part, again.part) and np.array_equal(m.known, again.known)


def test_masking_survival_rate(synth_grids):
    rng = np.random.default_rng(5)
    cfg = MaskingConfig(0.3)
    kept = total = 0
    for _ in range(10_000 // len(synth_grids)):
        masked, _ = mask_batch(synth_grids, cfg, rng)
        for g, m in zip(synth_grids, masked):
            total += sum(c < 7 for c, _, _ in g.segments)
            kept += sum(c < 7 for c, _, _ in m.segments)
    assert abs(kept / total - 0.7) < 0.02


def test_model_input_tokens(projector):
    fusion = ConditionFusion(motion_dim=121, text_dim=64, width=32)
    for T in (2, 7, 40):
        g = build_condition_grid(fill_unknown_gaps(T, 20.0, sequence=[TimedLabel("a person walks", 0, T)]),
                                 ENC, projector)
        mi = assemble_model_input(g, np.zeros((T, 121)), 5, fusion)
        assert mi.tokens.shape == (T + 2, 32)
    with pytest.raises(ConditioningError) as exc:
        assemble_model_input(g, np.zeros((T + 1, 121)), 5, fusion)
    assert exc.value.code == "SHAPE_MISMATCH"


def test_sequence_text_only_changes_sequence_token(projector):
    torch.manual_seed(0)
    fusion = ConditionFusion(motion_dim=121, text_dim=64, width=32)
    x = np.random.default_rng(0).normal(size=(6, 121))
    a = build_condition_grid(fill_unknown_gaps(6, 20.0, sequence=[TimedLabel("a person walks", 0, 6)]),
                             ENC, projector)
    b = build_condition_grid(fill_unknown_gaps(6, 20.0, sequence=[TimedLabel("a person waves", 0, 6)]),
                             ENC, projector)
    ta = assemble_model_input(a, x, 3, fusion).tokens
    tb = assemble_model_input(b, x, 3, fusion).tokens
    assert not torch.allclose(ta[0], tb[0])
    assert torch.equal(ta[1:], tb[1:])


def test_timestep_tokens_differ(projector):
    fusion = ConditionFusion(motion_dim=121, text_dim=64, width=32)
    g = build_condition_grid(fill_unknown_gaps(3, 20.0), ENC, projector)
    toks = torch.stack([assemble_model_input(g, np.zeros((3, 121)), s, fusion).timestep for s in range(100)])
    d = torch.cdist(toks, toks) + torch.eye(100)
    assert d.min() > 0


def test_stack_grids(synth_grids):
    batch = stack_grids(synth_grids[:3])
    T = max(g.num_frames for g in synth_grids[:3])
    assert batch["part"].shape == (3, T, 350) and batch["sequence"].shape == (3, 64)


def test_training_labels_exclude_unknown():
    labels = training_labels(a for _, a in synthesize_dataset(5, seed=0))
    assert UNKNOWN not in labels and all(isinstance(l, str) for l in labels)
