import math
from pathlib import Path

import numpy as np
import pytest

from gradcheck import check_grads
from intermode import actpred, collect, modesel, render, sim
from intermode.actpred import ActionPredictor, ActionPredictorConfig, Heads
from intermode.render import ProjectionError
from intermode.tensor import Graph, load_tensor, ops

GOLDEN = Path(__file__).parent / "golden"
SMALL = ActionPredictorConfig(patch=8, layers=2)
TOY = ActionPredictorConfig(hw=4, patch=2, dim=8, heads=2, layers=1, z_dim=3, sigma_px=0.8)


@pytest.fixture(scope="module")
def env():
    return collect.Env(sim.load_fixture("drawer_1")).calibrated(60)


def toy_inputs(cfg, b=2, seed=0):
    rng = np.random.default_rng(seed)
    views = rng.uniform(size=(b, cfg.n_views, cfg.hw, cfg.hw, cfg.channels)).astype(np.float32)
    return (actpred.patchify(views, cfg.patch), rng.normal(size=(b, cfg.z_dim)),
            rng.normal(size=(b, actpred.GRIP_DIM)), rng.integers(0, 4, b))


def toy_targets(cfg, b=2, seed=1):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-0.9, 0.9, size=(b, 3))
    quats = np.array([sim.approach_rotation(rng.normal(size=3)) for _ in range(b)])
    return actpred.encode_targets(p, quats, rng.integers(0, 2, b), cfg)


def test_patchify_round_trip():
    v = np.arange(2 * 5 * 8 * 8 * 7, dtype=np.float32).reshape(2, 5, 8, 8, 7)
    p = actpred.patchify(v, 4)
    assert p.shape == (2, 20, 112)
    assert np.array_equal(p[1, 4 + 3].reshape(4, 4, 7), v[1, 1, 4:8, 4:8])


def test_patch_permutation_invariant():
    model = ActionPredictor(TOY, seed=2)
    patches, eps, grip, phase = toy_inputs(TOY)
    base = model.forward(Graph(model.params, np.float64), patches, eps, grip, phase)
    perm = np.random.default_rng(3).permutation(TOY.n_patches)
    shuf = model.forward(Graph(model.params, np.float64), patches, eps, grip, phase, order=perm)
    for a, b in [(base.pos_logits, shuf.pos_logits), (base.rot_logits, shuf.rot_logits),
                 (base.grip_logit, shuf.grip_logit)]:
        assert np.allclose(a.value, b.value, atol=1e-10)


def test_golden_logits(env):
    model = ActionPredictor(SMALL, seed=0)
    obs = env.observe(sim.init_state(env.spec), seed=0, occlude_robot=False)
    pred = actpred.predict(model, env, obs, np.ones(32), env.spec.home, 0)
    golden = load_tensor(GOLDEN / "actpred_logits.aimt")
    got = np.concatenate([np.log(pred.heatmaps.ravel()), pred.rot_logits.ravel(), [pred.grip_logit]])
    assert np.allclose(got, golden, atol=1e-4)


def test_prediction_invariants(env):
    model = ActionPredictor(SMALL, seed=1)
    obs = env.observe(sim.init_state(env.spec), seed=0, occlude_robot=False)
    pred = actpred.predict(model, env, obs, np.zeros(32), env.spec.home, 2)
    assert np.allclose(pred.heatmaps.sum(axis=(1, 2)), 1.0)
    assert np.linalg.norm(pred.decoded.R) == pytest.approx(1.0)
    assert env.spec.in_workspace(pred.decoded.p)
    with pytest.raises(ValueError):
        actpred.predict(model, env, obs.views[:4], np.zeros(32), env.spec.home, 0)


def test_loss_minimum_is_target_entropy():
    t = toy_targets(TOY, b=3)
    g = Graph(dtype=np.float64)
    h = Heads(g.const(np.log(t.heat + 1e-300)), g.const(np.log(t.rot + 1e-300)),
              g.const(np.where(t.grip > 0, 50.0, -50.0)))
    terms = actpred.bc_terms(h, t)
    ent = -np.sum(np.where(t.heat > 0, t.heat * np.log(np.where(t.heat > 0, t.heat, 1)), 0), axis=(1, 2))
    assert np.allclose(terms["pos"].value, ent, atol=1e-9)
    assert np.allclose(terms["rot"].value, 0, atol=1e-9)
    assert np.allclose(terms["grip"].value, 0, atol=1e-9)


def test_zero_rotation_bin():
    assert np.array_equal(actpred.euler_bins(np.array([0, 0, 0, 1.0])), [0, 0, 0])
    t = actpred.encode_targets(np.zeros((1, 3)), np.array([[0, 0, 0, 1.0]]), [0], TOY)
    assert t.rot.shape == (1, 3, 72) and np.all(t.rot[0, :, 0] == 1) and t.rot.sum() == 3


def test_bins_cover_full_turn():
    assert actpred.ROT_BINS * actpred.BIN_DEG == 360.0
    for deg in (0, 5, 90, 175, 180, 355):
        q = actpred.bins_to_quat(np.array([0, 0, deg / 5]))
        assert actpred.euler_bins(q)[2] == deg // 5


def test_cross_entropy_two_by_two_hand_value():
    logits = np.array([[[1.0, 0.0, -1.0, 2.0]]])
    target = np.array([[[0.1, 0.2, 0.3, 0.4]]])
    g = Graph(dtype=np.float64)
    ce = ops.cross_entropy(g.const(logits), target).value
    lse = math.log(math.e + 1 + math.exp(-1) + math.exp(2))
    want = -(0.1 * (1 - lse) + 0.2 * (0 - lse) + 0.3 * (-1 - lse) + 0.4 * (2 - lse))
    assert ce[0, 0] == pytest.approx(want, abs=1e-12)


def test_bc_loss_gradients_match_finite_differences():
    model = ActionPredictor(TOY, seed=4)
    patches, eps, grip, phase = toy_inputs(TOY)
    t = toy_targets(TOY)

    def build(g):
        return actpred.bc_loss(model.forward(g, patches, eps, grip, phase), t)[0]

    assert check_grads(build, model.params, h=1e-5) < 1e-3


def test_target_outside_views_raises():
    with pytest.raises(ProjectionError):
        actpred.encode_targets(np.array([[1.5, 0, 0]]), np.array([[0, 0, 0, 1.0]]), [0], TOY)


def test_decode_matches_brute_force_argmax():
    rng = np.random.default_rng(0)
    cands = render.candidate_grid(8)
    for _ in range(100):
        heat = rng.dirichlet(np.full(64, 0.3), size=5).reshape(5, 8, 8)
        best, best_s = None, -np.inf
        for c in cands:
            s = 0.0
            for v, (a, b, _, _) in enumerate(render.VIEW_AXES):
                r = min(int((c[a] + 1) / 2 * 8), 7)
                col = min(int((c[b] + 1) / 2 * 8), 7)
                s += math.log(heat[v, r, col] + render.LOG_FLOOR)
            if s > best_s:
                best, best_s = c, s
        assert np.array_equal(render.decode_position(heat, cands), best)


# -- training ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_data(env):
    trajs = collect.heuristic_grasp_sampling(env, 12, seed=0)
    trajs = [t for t in trajs if t.valid][:8]
    return actpred.build_bc_data(trajs, {env.spec.name: env}, env.featurizer, SMALL)


@pytest.fixture(scope="module")
def small_selector(small_data):
    cfg = modesel.ModeSelectorConfig(K=2, hidden=16, dec_layers=1)
    return modesel.train(small_data.feats, small_data.z, cfg, epochs=2, seed=0).model


def test_zero_epochs_unchanged(small_data):
    res = actpred.train_bc(small_data, SMALL, epochs=0, seed=0)
    fresh = ActionPredictor(SMALL, seed=0)
    assert all(np.array_equal(res.model.params[k], fresh.params[k]) for k in fresh.params)


def test_bc_training_deterministic(small_data):
    a = actpred.train_bc(small_data, SMALL, epochs=1, seed=3)
    b = actpred.train_bc(small_data, SMALL, epochs=1, seed=3)
    assert a.model.checksum() == b.model.checksum()
    assert a.curve_csv().splitlines()[0] == "epoch,total,pos,rot,grip,elbo"


def test_action_loss_gives_selector_zero_gradient(small_data, small_selector):
    sel = small_selector
    model = ActionPredictor(SMALL, seed=0)
    model.fit_scales(small_data.z)
    g = Graph({**model.params, **sel.params}, np.float32)
    idx = np.arange(4)
    owner = small_data.traj[idx]
    noise = modesel.ElboNoise.draw(np.random.default_rng(0), 4, sel.cfg, True)
    h = modesel.elbo_heads(sel, g, sel.scale_feats(small_data.feats[owner]), sel.scale_z(small_data.z[owner]), noise)
    eps = ops.stop_gradient(h.eps_hat)
    heads = model.forward(g, actpred.patchify(small_data.views[idx], SMALL.patch), eps,
                          small_data.grip[idx], small_data.phase[idx])
    grads = g.backward(actpred.bc_loss(heads, actpred._subset(small_data.targets, idx))[0])
    assert all(np.all(grads[k] == 0) for k in sel.params)
    assert any(np.any(grads[k] != 0) for k in model.params)


def test_joint_without_elbo_keeps_selector(small_data, small_selector):
    before = small_selector.checksum()
    actpred.train_bc(small_data, SMALL, epochs=1, seed=0, joint=True, selector=small_selector, elbo_weight=0.0)
    assert small_selector.checksum() == before


def test_joint_with_elbo_updates_selector(small_data):
    cfg = modesel.ModeSelectorConfig(K=2, hidden=16, dec_layers=1)
    sel = modesel.train(small_data.feats, small_data.z, cfg, epochs=1, seed=0).model
    before = sel.checksum()
    res = actpred.train_bc(small_data, SMALL, epochs=1, seed=0, joint=True, selector=sel)
    assert sel.checksum() != before and res.curve[0]["elbo"] > 0


def test_joint_requires_selector(small_data):
    with pytest.raises(ValueError):
        actpred.train_bc(small_data, SMALL, epochs=1, joint=True)


# -- rollout ---------------------------------------------------------------------------

def test_scripted_oracle_rollout_succeeds(env):
    def oracle(phase, obs, state):
        if phase == 0:
            oracle.plan = sim.scripted_witness(state, 0, +1)
        return oracle.plan[phase]

    t = collect.run_policy(env, oracle, seed=0, source="oracle", with_steps=False, needs_obs=True)
    assert t.true_success and len(t.keyposes) == 4


def test_rollout_deterministic_and_four_steps(env, small_data, small_selector):
    model = actpred.train_bc(small_data, SMALL, epochs=1, seed=0).model
    a = actpred.rollout(env, small_selector, model, 1, seed=5)
    b = actpred.rollout(env, small_selector, model, 1, seed=5)
    assert len(a.keyposes) == 4
    assert a.final_dof == b.final_dof and all(np.array_equal(x.p, y.p) for x, y in zip(a.keyposes, b.keyposes))
    line = actpred.rollout_log_line(a, sim.init_state(env.spec).dof)
    assert '"k": 1' in line and "dof_delta" in line


def test_invalid_keypose_marks_failure(env):
    def wild(phase, obs, state):
        return sim.KeyPose(np.array([5.0, 0, 0]), np.array([0, 0, 0, 1.0]), 0)

    t = collect.run_policy(env, wild, seed=0, source="wild", with_steps=False, needs_obs=True)
    assert not t.valid and not t.true_success


# -- trained 1-drawer model (shared session run) ---------------------------------------

def dominant_modes(out):
    rows = (out / "eval" / "modes.csv").read_text().splitlines()[1:]
    return {int(r.split(",")[1]): (r.split(",")[3], float(r.split(",")[4])) for r in rows}


@pytest.mark.slow
def test_position_ce_excess_falls_threefold(drawer_run):
    rows = (drawer_run.out / "actpred" / "loss.csv").read_text().splitlines()
    pos = [float(r.split(",")[2]) for r in rows[1:]]
    assert len(pos) == 200
    ds = drawer_run.dataset(with_steps=True)
    env = drawer_run.env()
    data = actpred.build_bc_data(ds.records, {env.spec.name: env}, env.featurizer, SMALL)
    heat = data.targets.heat
    ent = float(np.mean(-np.sum(np.where(heat > 0, heat * np.log(np.where(heat > 0, heat, 1)), 0), axis=(1, 2))))
    assert pos[-1] > ent - 1e-6
    assert pos[0] - ent >= 3 * (pos[-1] - ent)


@pytest.mark.slow
def test_open_and_close_embeddings_move_handle_opposite_ways(drawer_run):
    sel, model = drawer_run.models()
    env = drawer_run.env()
    modes = dominant_modes(drawer_run.out)
    best = {}
    for k, (mode, ssr) in modes.items():
        if mode in ("0+", "0-") and ssr > best.get(mode, (0, -1))[1]:
            best[mode] = (k, ssr)
    assert set(best) == {"0+", "0-"}
    axis = env.spec.parts[0].axis
    shift = {}
    for mode, (k, _) in best.items():
        d = [(t.keyposes[3].p - t.keyposes[1].p) @ axis
             for t in (actpred.rollout(env, sel, model, k, seed=s) for s in range(5))]
        shift[mode] = float(np.median(d))
    assert shift["0+"] * shift["0-"] < 0
