import numpy as np
import pytest

from vidgait.core import KIN_INDEX, EventAnnotations
from vidgait.gait_params import (
    CycleRangeError, GaitCycle, extract_parameters, param_row, parse_cycles, read_parameters, trial_parameters,
    write_parameters,
)
from vidgait.synth import GaitSpec, generate


def canonical_events():
    return EventAnnotations(lfc=[0.0, 1.0], rfc=[0.50], lfo=[0.62], rfo=[0.12])


def flat_kin(T=31, fps=30.0, **channels):
    kin = np.zeros((T, 9))
    for k, v in channels.items():
        kin[:, KIN_INDEX[k]] = v
    return kin


def test_one_left_cycle():
    cycles = parse_cycles(canonical_events())
    assert len(cycles) == 1
    c = cycles[0]
    assert (c.side, c.start, c.end, c.opposite_off, c.opposite_contact, c.foot_off) == \
        ("left", 0.0, 1.0, 0.12, 0.50, 0.62)


def test_missing_opposite_contact():
    ev = EventAnnotations(lfc=[0.0, 1.0], rfc=[1.5], lfo=[0.62], rfo=[0.12])
    cycles, skipped = parse_cycles(ev, return_skipped=True)
    assert not [c for c in cycles if c.side == "left"]
    assert any(s.reason == "missing opposite contact" for s in skipped if s.side == "left")


def test_out_of_order_skipped():
    ev = EventAnnotations(lfc=[0.0, 1.0], rfc=[0.50], lfo=[0.40], rfo=[0.12])
    cycles, skipped = parse_cycles(ev, return_skipped=True)
    assert cycles == [] and skipped[0].reason == "out of order"


def test_three_contacts_two_cycles():
    ev = EventAnnotations(lfc=[0.0, 1.0, 2.0], rfc=[0.5, 1.5], lfo=[0.62, 1.62], rfo=[0.12, 1.12])
    left = [c for c in parse_cycles(ev) if c.side == "left"]
    assert len(left) == 2


def test_right_cycle_mirrors_left():
    ev = EventAnnotations(lfc=[0.0, 1.0, 2.0], rfc=[0.5, 1.5], lfo=[0.62, 1.62], rfo=[0.12, 1.12])
    right = [c for c in parse_cycles(ev) if c.side == "right"]
    assert len(right) == 1
    assert (right[0].start, right[0].opposite_off, right[0].opposite_contact, right[0].foot_off) == \
        (0.5, 0.62, 1.0, 1.12)


def test_parameter_definitions():
    c = parse_cycles(canonical_events())[0]
    kin = flat_kin(pelvis_vel=1.2, foot_pos_r=0.30, foot_pos_l=-0.25)
    p = extract_parameters(c, kin, 30.0)
    assert p.cadence == pytest.approx(120.0)
    assert p.double_stance == pytest.approx(0.24)
    assert p.single_support == pytest.approx(0.38)
    assert p.step_time == pytest.approx(0.50)
    assert p.double_stance + 2 * p.single_support == pytest.approx(1.0)
    assert p.step_length == pytest.approx(0.55)
    assert p.velocity == pytest.approx(1.2)


def test_step_length_interpolated_at_contact():
    c = GaitCycle("left", 0.0, 1.0, 0.12, 0.5, 0.62)
    kin = flat_kin()
    t = np.arange(31) / 30.0
    kin[:, KIN_INDEX["foot_pos_r"]] = t
    p = extract_parameters(c, kin, 30.0)
    assert p.step_length == pytest.approx(0.5)
    assert p.step_length_start == pytest.approx(0.0)


def test_velocity_time_average():
    c = GaitCycle("left", 0.0, 1.0, 0.12, 0.5, 0.62)
    kin = flat_kin()
    kin[:, KIN_INDEX["pelvis_vel"]] = np.arange(31) / 30.0
    assert extract_parameters(c, kin, 30.0).velocity == pytest.approx(0.5)


def test_range_and_finite_errors():
    c = GaitCycle("left", 0.0, 2.0, 0.12, 0.5, 0.62)
    with pytest.raises(CycleRangeError):
        extract_parameters(c, flat_kin(), 30.0)
    kin = flat_kin()
    kin[3, 0] = np.nan
    with pytest.raises(ValueError):
        extract_parameters(GaitCycle("left", 0.0, 1.0, 0.12, 0.5, 0.62), kin, 30.0)


@pytest.mark.parametrize("cad,sl", [(60, 0.4), (110, 0.6), (140, 0.7)])
def test_oracle_closure(cad, sl):
    spec = GaitSpec(cadence_spm=cad, step_length_m=sl, duration_s=6.0)
    t = generate(spec)
    params = trial_parameters(t.gt_events, t.gt_kinematics, t.fps)
    assert params
    for p in params:
        assert p.cadence == pytest.approx(cad, rel=0.02)
        assert p.step_length == pytest.approx(sl, rel=0.02)
        assert p.velocity == pytest.approx(spec.speed_mps, rel=0.02)
        assert p.cadence * p.step_time == pytest.approx(60.0, abs=1e-9)
        assert p.double_stance + 2 * p.single_support == pytest.approx(p.end - p.start, abs=1e-6)


def test_time_shift_invariance():
    c = parse_cycles(canonical_events())[0]
    kin = flat_kin(T=91, pelvis_vel=1.0)
    kin[:, KIN_INDEX["foot_pos_r"]] = np.sin(np.arange(91) / 7.0)
    a = extract_parameters(c, kin, 30.0)
    shifted = GaitCycle(c.side, c.start + 1.0, c.end + 1.0, c.opposite_off + 1.0, c.opposite_contact + 1.0,
                        c.foot_off + 1.0)
    b = extract_parameters(shifted, kin, 30.0, t0=1.0)
    for name in ("cadence", "step_time", "step_length", "velocity", "double_stance", "single_support"):
        assert getattr(a, name) == pytest.approx(getattr(b, name), abs=1e-12)


def test_fps_independence():
    res = {}
    for fps in (30.0, 60.0):
        t = generate(GaitSpec(cadence_spm=100, step_length_m=0.5, fps=fps, duration_s=5.0))
        res[fps] = trial_parameters(t.gt_events, t.gt_kinematics, t.fps)
    for a, b in zip(res[30.0], res[60.0]):
        for name in ("cadence", "step_time", "step_length", "velocity", "double_stance", "single_support"):
            assert getattr(a, name) == pytest.approx(getattr(b, name), rel=0.01)


def test_csv_roundtrip(tmp_path):
    p = extract_parameters(parse_cycles(canonical_events())[0], flat_kin(pelvis_vel=1.1), 30.0)
    path = tmp_path / "p.csv"
    write_parameters(path, [param_row("t1", p, "est")])
    rows = read_parameters(path)
    assert rows[0]["trial_id"] == "t1" and rows[0]["source"] == "est"
    assert rows[0]["velocity_mps"] == p.velocity
    assert path.read_text().splitlines()[0] == ("trial_id,side,start_s,end_s,cadence_spm,step_time_s,step_length_m,"
                                                "velocity_mps,double_stance_s,single_support_s,source")
