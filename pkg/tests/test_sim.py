import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intermode import sim
from intermode.sim import KeyPose, ObjectSpec, PartSpec, SpecError

IDENT = np.array([0.0, 0.0, 0.0, 1.0])


def unit_drawer() -> ObjectSpec:
    part = PartSpec(name="drawer", joint_kind="prismatic", axis=np.array([1.0, 0, 0]),
                    joint_range=(0.0, 1.0), origin=np.array([-0.75, 0, 0]),
                    body=np.array([0.2, 0.2, 0.1]), handle_offset=np.array([0.23, 0, 0]),
                    color=np.array([0.8, 0.2, 0.2]))
    return ObjectSpec("unit_drawer", (part,))


def at_phase(state, phase):
    return replace(state, phase=phase)


def test_half_open_is_median():
    state = sim.init_state(unit_drawer())
    assert state.dof.tolist() == [0.5]


def test_degenerate_range_rejected():
    d = unit_drawer().to_json()
    d["parts"][0]["joint_range"] = [0.2, 0.2]
    with pytest.raises(SpecError):
        ObjectSpec.from_json(d)


def test_part_leaving_workspace_rejected():
    d = unit_drawer().to_json()
    d["parts"][0]["joint_range"] = [0.0, 3.0]
    with pytest.raises(SpecError):
        ObjectSpec.from_json(d)


def test_random_init_reproducible():
    spec = sim.load_fixture("drawer_2")
    a = sim.init_state(spec, "random", seed=3)
    b = sim.init_state(spec, "random", seed=3)
    assert np.array_equal(a.dof, b.dof)
    assert not np.array_equal(a.dof, sim.init_state(spec, "random", seed=4).dof)


def test_attached_prismatic_projection():
    spec = unit_drawer()
    state = sim.init_state(spec)
    h = spec.parts[0].handle_world(0.5)
    state = sim.step_keypose(at_phase(state, 1), KeyPose(h, IDENT, 1), 2)
    assert state.attached_part == 0
    state = sim.step_keypose(state, KeyPose(h + np.array([0.3, 0, 0]), IDENT, 1), 3)
    assert state.dof[0] == pytest.approx(0.8)


def test_push_closes_drawer():
    spec = unit_drawer()
    state = sim.init_state(spec)
    front = -0.75 + 0.5 + 0.2
    p1 = np.array([front + 0.05, 0.0, 0.05])
    state = sim.step_keypose(at_phase(state, 1), KeyPose(p1, IDENT, 0), 2)
    state = sim.step_keypose(state, KeyPose(np.array([front - 0.3, 0.0, 0.05]), IDENT, 0), 3)
    assert state.dof[0] == pytest.approx(0.2)


def test_grasp_radius_rule():
    spec = unit_drawer()
    h = spec.parts[0].handle_world(0.5)
    far = h + np.array([2 * sim.GRASP_RADIUS, 0, 0])
    state = sim.step_keypose(at_phase(sim.init_state(spec), 1), KeyPose(far, IDENT, 1), 2)
    assert state.attached_part is None


def test_out_of_workspace_flags_invalid():
    state = sim.init_state(unit_drawer())
    out = sim.step_keypose(state, KeyPose(np.array([1.5, 0, 0]), IDENT, 0), 0)
    assert not out.valid


def test_collision_flags_invalid():
    state = sim.init_state(unit_drawer())
    inside = np.array([-0.25, 0.0, 0.0])
    assert not sim.step_keypose(state, KeyPose(inside, IDENT, 0), 0).valid


def test_phase_order_enforced():
    state = sim.init_state(unit_drawer())
    with pytest.raises(ValueError):
        sim.step_keypose(state, KeyPose(np.zeros(3), IDENT, 0), 2)


@pytest.mark.parametrize("final, expected", [(0.85, True), (0.5, False), (0.79, False)])
def test_dof_success_rule(final, expected):
    spec = unit_drawer()
    a = sim.init_state(spec)
    b = replace(a, dof=np.array([final]))
    assert sim.dof_success(a, b)[1] is expected


def test_cloud_only_moved_part_changes():
    spec = sim.load_fixture("drawer_2")
    a = sim.init_state(spec)
    b = replace(a, dof=np.array([0.5, 0.3]))
    ca, cb = sim.render_cloud(a, seed=7), sim.render_cloud(b, seed=7)
    n = sim.POINTS_PER_PART
    assert not np.array_equal(ca.points[:n], cb.points[:n])
    assert np.array_equal(ca.points[n:], cb.points[n:])


def test_gripper_point_budget():
    state = sim.init_state(sim.load_fixture("door"))
    a = sim.render_cloud(state, occlude_robot=True, seed=1)
    b = sim.render_cloud(state, occlude_robot=False, seed=1)
    assert len(b) - len(a) == sim.GRIPPER_POINTS


def test_cloud_deterministic():
    state = sim.init_state(sim.load_fixture("switch"))
    a, b = sim.render_cloud(state, seed=5), sim.render_cloud(state, seed=5)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.colors, b.colors)


@pytest.mark.parametrize("name", sim.FIXTURE_NAMES)
def test_fixture_mode_duality(name):
    spec = sim.load_fixture(name)
    state = sim.init_state(spec)
    for i in range(len(spec.parts)):
        for direction in (1, -1):
            final = sim.run_keyposes(state, sim.scripted_witness(state, i, direction))
            assert final.valid
            assert sim.dof_success(state, final)[0][i]
            assert sim.executed_mode(state, final) == f"{i}{'+' if direction > 0 else '-'}"


@pytest.mark.parametrize("name", sim.FIXTURE_NAMES)
def test_fixture_json_round_trip(name):
    spec = sim.load_fixture(name)
    again = ObjectSpec.from_json(json.loads(json.dumps(spec.to_json())))
    assert again.to_json() == spec.to_json()


points = st.lists(st.floats(-0.95, 0.95), min_size=3, max_size=3).map(np.array)


@settings(max_examples=60, deadline=None)
@given(points, points, st.booleans(), st.sampled_from(sim.FIXTURE_NAMES))
def test_joint_values_stay_clamped(p1, p2, close, name):
    spec = sim.load_fixture(name)
    state = sim.init_state(spec)
    q = 1 if close else 0
    seq = [KeyPose(p1, IDENT, 0), KeyPose(p1, IDENT, 0), KeyPose(p1, IDENT, q), KeyPose(p2, IDENT, q)]
    final = sim.run_keyposes(state, seq)
    for part, d in zip(spec.parts, final.dof):
        assert part.d_min <= d <= part.d_max


@settings(max_examples=30, deadline=None)
@given(points, points)
def test_open_hand_never_opens_drawers(p1, p2):
    spec = sim.load_fixture("drawer_2")
    state = sim.init_state(spec)
    seq = [KeyPose(p1, IDENT, 0), KeyPose(p1, IDENT, 0), KeyPose(p1, IDENT, 0), KeyPose(p2, IDENT, 0)]
    final = sim.run_keyposes(state, seq)
    assert np.all(final.dof <= state.dof)
