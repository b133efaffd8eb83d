"""Scenes, window extraction, standardization, files, and synthetic data."""

import numpy as np
import pytest

from trajdistill import (
    ContractViolation,
    DataError,
    ParseError,
    Scene,
    Standardizer,
    SyntheticSpec,
    Track,
    integrate_velocity,
    load_interchange,
    load_trajectory_file,
    make_windows,
    save_interchange,
    split_windows,
    stack_windows,
    synth_generate,
)
from trajdistill.data import dataset_manifest


def straight_scene(n_agents: int = 1, steps: int = 24, dt: float = 0.5) -> Scene:
    """Agents on parallel lanes moving +x at 1 m/s, exactly representable."""
    tracks = {}
    for a in range(n_agents):
        xs = np.arange(steps, dtype=np.float32) * np.float32(dt)
        ys = np.full(steps, np.float32(a), dtype=np.float32)
        tracks[f"a{a}"] = Track(start=0, positions=np.stack([xs, ys], axis=1))
    return Scene(scene_id="lanes", dt=dt, tracks=tracks)


# --- primitives -------------------------------------------------------------


def test_integrate_velocity_oracle():
    out = integrate_velocity(np.zeros(2), np.array([[1.0, 0.0], [1.0, 0.0]]), 0.4)
    assert np.allclose(out, [[0.4, 0.0], [0.8, 0.0]], atol=1e-7)
    assert out.dtype == np.float32


def test_integrate_velocity_batched():
    anchors = np.array([[0.0, 0.0], [10.0, -2.0]])
    v = np.ones((2, 3, 2))
    out = integrate_velocity(anchors, v, 0.5)
    assert out.shape == (2, 3, 2)
    assert np.allclose(out[1, 2], [11.5, -0.5], atol=1e-6)
    with pytest.raises(ContractViolation):
        integrate_velocity(np.zeros(3), v, 0.5)


def test_track_and_scene_validation():
    with pytest.raises(DataError):
        Track(start=0, positions=np.zeros((4, 3)))
    with pytest.raises(DataError):
        Scene(scene_id="s", dt=0.0)
    sc = straight_scene()
    assert sc.position_at("a0", 3) is not None
    assert sc.position_at("a0", 99) is None
    assert sc.position_at("ghost", 0) is None


# --- window extraction --------------------------------------------------------


def test_window_count_and_stride():
    sc = straight_scene(steps=24)
    span = 8 + 12
    for stride in (1, 2, 4):
        ws = make_windows(sc, 8, 12, stride=stride)
        assert len(ws) == (24 - span) // stride + 1
        anchors = [w.t_index for w in ws]
        assert anchors == list(range(7, 7 + stride * len(ws), stride))


def test_window_geometry():
    sc = straight_scene(steps=24, dt=0.5)
    w = make_windows(sc, 8, 12)[0]
    assert w.ego_history.shape == (8, 6)
    assert w.future_velocities.shape == (12, 2)
    # anchor row is the last observed step, expressed relative to itself
    assert np.allclose(w.ego_history[-1, 0:2], 0.0, atol=1e-7)
    # constant +x motion at 1 m/s
    assert np.allclose(w.ego_history[:, 2], 1.0, atol=1e-5)
    assert np.allclose(w.ego_history[:, 3], 0.0, atol=1e-7)
    assert np.allclose(w.ego_history[:, 4], 1.0, atol=1e-5)  # speed
    assert np.allclose(w.ego_history[:, 5], 0.0, atol=1e-6)  # heading
    assert np.allclose(w.future_velocities, [[1.0, 0.0]] * 12, atol=1e-5)


def test_future_positions_reconstruct_track():
    spec = SyntheticSpec(n_scenes=2, agents_per_scene=2, steps_per_agent=30)
    for sc in synth_generate(spec, 5):
        for w in make_windows(sc, 8, 12, stride=3):
            tr = sc.tracks[w.agent_id]
            i0 = w.t_index - tr.start + 1
            truth = tr.positions[i0 : i0 + 12]
            assert np.max(np.abs(w.future_positions() - truth)) < 1e-3


def test_window_translation_invariance():
    spec = SyntheticSpec(n_scenes=1, agents_per_scene=3, steps_per_agent=30, noise_std=0.0)
    base = synth_generate(spec, 9)[0]
    # exactly representable grid positions keep the shifted arithmetic exact
    snapped = {
        aid: Track(start=tr.start, positions=np.round(tr.positions * 4.0) / 4.0)
        for aid, tr in base.tracks.items()
    }
    sc_a = Scene(scene_id="s", dt=base.dt, tracks=snapped)
    shifted = {
        aid: Track(start=tr.start, positions=tr.positions + np.float32(128.0))
        for aid, tr in snapped.items()
    }
    sc_b = Scene(scene_id="s", dt=base.dt, tracks=shifted)
    wa = make_windows(sc_a, 8, 12, neighbor_radius=50.0)
    wb = make_windows(sc_b, 8, 12, neighbor_radius=50.0)
    assert len(wa) == len(wb) > 0
    for a, b in zip(wa, wb):
        assert np.array_equal(a.ego_history, b.ego_history)
        assert np.array_equal(a.neighbors, b.neighbors)
        assert np.array_equal(a.neighbor_mask, b.neighbor_mask)
        assert np.array_equal(a.future_velocities, b.future_velocities)


def test_make_windows_validation():
    sc = straight_scene()
    with pytest.raises(ContractViolation):
        make_windows(sc, 1, 12)
    with pytest.raises(ContractViolation):
        make_windows(sc, 8, 0)
    with pytest.raises(ContractViolation):
        make_windows(sc, 8, 12, stride=0)


def test_short_track_yields_no_windows():
    sc = straight_scene(steps=10)
    assert make_windows(sc, 8, 12) == []


# --- neighbors ---------------------------------------------------------------


def neighbor_scene() -> Scene:
    """Ego at origin lane; one near, one far, one out-of-radius agent."""
    steps = 21
    dt = 0.5
    t = np.arange(steps, dtype=np.float32) * np.float32(dt)
    zeros = np.zeros(steps, dtype=np.float32)
    tracks = {
        "ego": Track(0, np.stack([t, zeros], axis=1)),
        "near": Track(0, np.stack([t, zeros + 1.0], axis=1)),
        "far": Track(0, np.stack([t, zeros + 3.0], axis=1)),
        "outside": Track(0, np.stack([t, zeros + 40.0], axis=1)),
    }
    return Scene(scene_id="nbr", dt=dt, tracks=tracks)


def test_neighbor_selection_and_ordering():
    sc = neighbor_scene()
    w = next(x for x in make_windows(sc, 8, 12, max_neighbors=8, neighbor_radius=5.0) if x.agent_id == "ego")
    assert w.neighbor_mask.tolist() == [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    # nearest first: near at dy=1, far at dy=3, outside dropped
    assert np.allclose(w.neighbors[0, 0:2], [0.0, 1.0], atol=1e-6)
    assert np.allclose(w.neighbors[1, 0:2], [0.0, 3.0], atol=1e-6)
    assert np.array_equal(w.neighbors[2:], np.zeros((6, 6), dtype=np.float32))


def test_neighbor_relative_velocity_columns():
    sc = neighbor_scene()
    w = next(x for x in make_windows(sc, 8, 12, neighbor_radius=5.0) if x.agent_id == "ego")
    # all agents move +x at 1 m/s, so relative velocity vanishes but
    # absolute speed and heading stay in the last two columns
    assert np.allclose(w.neighbors[0, 2:4], 0.0, atol=1e-4)
    assert np.allclose(w.neighbors[0, 4], 1.0, atol=1e-4)
    assert np.allclose(w.neighbors[0, 5], 0.0, atol=1e-4)


def test_neighbor_cap():
    steps = 21
    dt = 0.5
    t = np.arange(steps, dtype=np.float32) * np.float32(dt)
    zeros = np.zeros(steps, dtype=np.float32)
    tracks = {"ego": Track(0, np.stack([t, zeros], axis=1))}
    for i in range(5):
        tracks[f"n{i}"] = Track(0, np.stack([t, zeros + np.float32(0.5 + 0.5 * i)], axis=1))
    sc = Scene(scene_id="cap", dt=dt, tracks=tracks)
    w = next(x for x in make_windows(sc, 8, 12, max_neighbors=2, neighbor_radius=10.0) if x.agent_id == "ego")
    assert w.neighbor_mask.tolist() == [1.0, 1.0]
    assert np.allclose(w.neighbors[:, 1], [0.5, 1.0], atol=1e-6)


def test_neighbor_requires_presence_at_anchor():
    sc = neighbor_scene()
    # truncate "near" so it ends before the last anchors
    sc.tracks["near"] = Track(0, sc.tracks["near"].positions[:8])
    ws = [x for x in make_windows(sc, 8, 12, neighbor_radius=5.0) if x.agent_id == "ego"]
    late = ws[-1]  # anchor at t=20, beyond near's track
    assert late.neighbor_mask.tolist()[0] == 1.0
    assert np.allclose(late.neighbors[0, 1], 3.0, atol=1e-6)  # only "far" remains
    assert late.neighbor_mask.sum() == 1.0


# --- batching ----------------------------------------------------------------


def test_stack_windows():
    sc = straight_scene(n_agents=2, steps=24)
    ws = make_windows(sc, 8, 12)
    batch = stack_windows(ws)
    assert batch.size == len(ws)
    assert batch.ego.shape == (len(ws), 8, 6)
    assert batch.target_v.shape == (len(ws), 12, 2)
    assert batch.meta[0] == (ws[0].scene_id, ws[0].agent_id, ws[0].t_index)
    with pytest.raises(DataError):
        stack_windows([])


def test_stack_windows_shape_mismatch():
    sc = straight_scene(steps=24)
    a = make_windows(sc, 8, 12)[0]
    b = make_windows(sc, 8, 4)[0]
    with pytest.raises(DataError):
        stack_windows([a, b])


# --- standardizer --------------------------------------------------------------


def test_standardizer_round_trip():
    spec = SyntheticSpec(n_scenes=3, agents_per_scene=2, steps_per_agent=26)
    ws = [w for sc in synth_generate(spec, 2) for w in make_windows(sc, 8, 12, stride=2)]
    st = Standardizer.fit(ws)
    v = ws[0].future_velocities
    z = st.transform(v)
    assert np.max(np.abs(st.inverse(z) - v)) < 1e-5
    pooled = np.concatenate([w.future_velocities.reshape(-1, 2) for w in ws])
    z_all = st.transform(pooled)
    assert np.allclose(z_all.mean(axis=0), 0.0, atol=1e-4)
    assert np.allclose(z_all.std(axis=0), 1.0, atol=1e-3)


def test_standardizer_identity_and_floor():
    ident = Standardizer.identity()
    v = np.array([[1.5, -2.0]], dtype=np.float32)
    assert np.array_equal(ident.transform(v), v)
    sc = straight_scene(steps=24)  # constant velocity: zero variance
    st = Standardizer.fit(make_windows(sc, 8, 12))
    assert np.all(st.std >= 1e-6)
    with pytest.raises(ContractViolation):
        Standardizer(np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(DataError):
        Standardizer.fit([])


# --- synthetic corpus -----------------------------------------------------------


def test_synth_deterministic():
    spec = SyntheticSpec(n_scenes=4, agents_per_scene=3, steps_per_agent=20)
    a = synth_generate(spec, 31)
    b = synth_generate(spec, 31)
    c = synth_generate(spec, 32)
    for sa, sb in zip(a, b):
        assert sa.scene_id == sb.scene_id
        for aid in sa.tracks:
            assert np.array_equal(sa.tracks[aid].positions, sb.tracks[aid].positions)
    assert not np.array_equal(a[0].tracks["a0"].positions, c[0].tracks["a0"].positions)


def test_synth_manifest():
    spec = SyntheticSpec(n_scenes=4, agents_per_scene=3, steps_per_agent=20)
    m = dataset_manifest(synth_generate(spec, 1))
    assert m["scenes"] == 4
    assert m["agents"] == 12
    assert m["points"] == 4 * 3 * 20
    assert m["dt"] == spec.dt


def test_synth_spec_validation():
    with pytest.raises(ContractViolation):
        SyntheticSpec(n_scenes=0)
    with pytest.raises(ContractViolation):
        SyntheticSpec(steps_per_agent=3)
    with pytest.raises(ContractViolation):
        SyntheticSpec(speed_low=0.0)
    with pytest.raises(ContractViolation):
        SyntheticSpec(branch_low_frac=0.7, branch_high_frac=0.5)
    with pytest.raises(ContractViolation):
        SyntheticSpec(noise_std=-0.1)


# --- splits ----------------------------------------------------------------------


def test_split_disjoint_and_covering():
    spec = SyntheticSpec(n_scenes=3, agents_per_scene=2, steps_per_agent=26)
    ws = [w for sc in synth_generate(spec, 7) for w in make_windows(sc, 8, 12)]
    tr, va, te = split_windows(ws, (0.6, 0.2, 0.2), seed=13)
    assert len(tr) + len(va) + len(te) == len(ws)
    key = lambda w: (w.scene_id, w.agent_id, w.t_index)
    all_keys = sorted(map(key, ws))
    got = sorted(map(key, tr + va + te))
    assert got == all_keys
    assert set(map(key, tr)).isdisjoint(map(key, te))


def test_split_deterministic():
    spec = SyntheticSpec(n_scenes=2, agents_per_scene=2, steps_per_agent=26)
    ws = [w for sc in synth_generate(spec, 7) for w in make_windows(sc, 8, 12)]
    key = lambda w: (w.scene_id, w.agent_id, w.t_index)
    a = split_windows(ws, (0.5, 0.25, 0.25), seed=5)
    b = split_windows(ws, (0.5, 0.25, 0.25), seed=5)
    c = split_windows(ws, (0.5, 0.25, 0.25), seed=6)
    assert list(map(key, a[0])) == list(map(key, b[0]))
    assert list(map(key, a[0])) != list(map(key, c[0]))


def test_split_validation():
    with pytest.raises(ContractViolation):
        split_windows([], (0.5, 0.5, 0.5), seed=0)
    with pytest.raises(ContractViolation):
        split_windows([], (1.2, -0.1, -0.1), seed=0)


# --- interchange files --------------------------------------------------------------


def test_interchange_round_trip(tmp_path):
    spec = SyntheticSpec(n_scenes=3, agents_per_scene=2, steps_per_agent=15)
    scenes = synth_generate(spec, 11)
    path = str(tmp_path / "scenes.csv")
    save_interchange(path, scenes)
    back = load_interchange(path, dt=spec.dt)
    assert [s.scene_id for s in back] == [s.scene_id for s in scenes]
    for sa, sb in zip(scenes, back):
        assert sorted(sa.tracks) == sorted(sb.tracks)
        for aid in sa.tracks:
            assert sa.tracks[aid].start == sb.tracks[aid].start
            assert np.array_equal(sa.tracks[aid].positions, sb.tracks[aid].positions)


def test_interchange_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("wrong,header\n1,2\n")
    with pytest.raises(ParseError):
        load_interchange(str(p), dt=0.4)


def test_interchange_rejects_bad_rows(tmp_path):
    head = "scene_id,agent_id,t_index,x,y\n"
    p = tmp_path / "short.csv"
    p.write_text(head + "s,a,0,1.0\n")
    with pytest.raises(ParseError):
        load_interchange(str(p), dt=0.4)
    p2 = tmp_path / "nonnum.csv"
    p2.write_text(head + "s,a,zero,1.0,2.0\n")
    with pytest.raises(ParseError):
        load_interchange(str(p2), dt=0.4)
    p3 = tmp_path / "dup.csv"
    p3.write_text(head + "s,a,0,1.0,2.0\ns,a,0,1.5,2.5\n")
    with pytest.raises(DataError):
        load_interchange(str(p3), dt=0.4)
    p4 = tmp_path / "gap.csv"
    p4.write_text(head + "s,a,0,1.0,2.0\ns,a,2,1.5,2.5\n")
    with pytest.raises(DataError):
        load_interchange(str(p4), dt=0.4)


# --- plain trajectory files ------------------------------------------------------


def test_trajectory_file_basic(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("0 1 0.0 0.0\n10 1 1.0 0.0\n20 1 2.0 0.0\n")
    sc = load_trajectory_file(str(p), dt=0.4)
    tr = sc.tracks["1"]
    assert tr.start == 0
    assert np.allclose(tr.positions, [[0, 0], [1, 0], [2, 0]])
    assert sc.scene_id == "t.txt"


def test_trajectory_file_interpolates_short_gaps(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("0 7 0.0 0.0\n10 7 1.0 1.0\n40 7 4.0 4.0\n")
    sc = load_trajectory_file(str(p), dt=0.4, max_gap=2)
    tr = sc.tracks["7"]
    # stride 10 inferred; frames 20 and 30 filled linearly
    assert tr.length == 5
    assert np.allclose(tr.positions[2], [2.0, 2.0], atol=1e-6)
    assert np.allclose(tr.positions[3], [3.0, 3.0], atol=1e-6)


def test_trajectory_file_splits_long_gaps(tmp_path):
    p = tmp_path / "t.txt"
    rows = [f"{f} 3 {f / 10} 0.0" for f in (0, 10, 20)]
    rows += [f"{f} 3 {f / 10} 5.0" for f in (80, 90)]
    p.write_text("\n".join(rows) + "\n")
    sc = load_trajectory_file(str(p), dt=0.4, max_gap=2)
    assert sorted(sc.tracks) == ["3#0", "3#1"]
    assert sc.tracks["3#0"].start == 0
    assert sc.tracks["3#0"].length == 3
    assert sc.tracks["3#1"].start == 8
    assert sc.tracks["3#1"].length == 2


def test_trajectory_file_errors(tmp_path):
    p = tmp_path / "cols.txt"
    p.write_text("0 1 0.0\n")
    with pytest.raises(ParseError) as e:
        load_trajectory_file(str(p))
    assert "1" in str(e.value)  # line number surfaces in the message
    p2 = tmp_path / "frame.txt"
    p2.write_text("0.5 1 0.0 0.0\n")
    with pytest.raises(ParseError):
        load_trajectory_file(str(p2))
    p3 = tmp_path / "num.txt"
    p3.write_text("0 1 x 0.0\n")
    with pytest.raises(ParseError):
        load_trajectory_file(str(p3))
    p4 = tmp_path / "dup.txt"
    p4.write_text("0 1 0.0 0.0\n0 1 1.0 1.0\n")
    with pytest.raises(DataError):
        load_trajectory_file(str(p4))
    p5 = tmp_path / "empty.txt"
    p5.write_text("\n")
    with pytest.raises(DataError):
        load_trajectory_file(str(p5))


def test_trajectory_file_numeric_agent_ids(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("0 1.0 0.0 0.0\n10 1.0 1.0 0.0\n")
    sc = load_trajectory_file(str(p))
    assert list(sc.tracks) == ["1"]
