import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roadrl.environment import EpisodeConfig, Scene
from roadrl.errors import EmptyFeasibleSet, LengthMismatch, NoPathException
from roadrl.safety import (SafetyConfig, constrain, enumerate_free_set,
                           lexicographic_min, project)

from oracles import brute_force_free_set, lattice_centers, linear_scan_project


def make_scene(occ, n0=0.0, v0=2.0):
    occ = np.asarray(occ, dtype=np.int8)
    return Scene(occ, np.full(occ.shape, 2.0), n0, v0)


def small_config(**kw):
    base = dict(W=3, H_s=4, H_p=2, v_max=3, move_layers=1, rng_seed=0)
    base.update(kw)
    return EpisodeConfig(**base)


def flat_set(fs):
    return sorted(tuple(row) for row in fs.flat)


# -- enumeration ---------------------------------------------------------------


def test_free_road_single_layer_three_candidates():
    cfg = small_config(H_p=1, H_s=1)
    scene = make_scene(np.zeros((1, 3)), n0=0.0, v0=2.0)
    fs = enumerate_free_set(scene, cfg, SafetyConfig(speed_levels=(2.0,)))
    assert fs.count == 3
    assert flat_set(fs) == [(-1.0, 2.0), (0.0, 2.0), (1.0, 2.0)]


def test_wall_ahead_forces_empty_set():
    cfg = small_config(H_p=1, H_s=1)
    scene = make_scene(np.ones((1, 3)), n0=0.0, v0=2.0)
    fs = enumerate_free_set(scene, cfg, SafetyConfig(speed_levels=(2.0,)))
    assert fs.is_empty


def test_stationary_candidate_survives_wall_when_slow():
    cfg = small_config(H_p=1, H_s=1, v_max=1)
    scene = make_scene(np.ones((1, 3)), n0=0.3, v0=1.0)
    fs = enumerate_free_set(scene, cfg, SafetyConfig())
    # only the hold-position candidate (v=0, n frozen at 0.3) survives
    assert fs.count == 1
    assert fs.flat[0] == pytest.approx([0.3, 0.0])


def test_enumeration_requires_window_depth():
    cfg = small_config(H_p=2, H_s=4)
    scene = make_scene(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        enumerate_free_set(scene, cfg, SafetyConfig())


def test_centripetal_bound_prunes_fast_swerves():
    cfg = small_config(H_p=2, H_s=2, v_max=3)
    scene = make_scene(np.zeros((2, 3)), n0=0.0, v0=3.0)
    loose = enumerate_free_set(scene, cfg, SafetyConfig(c_max=100.0))
    tight = enumerate_free_set(scene, cfg, SafetyConfig(c_max=1.0))
    assert tight.count < loose.count
    swerving = [tuple(r) for r in loose.flat
                if abs((r[1] - 2.0 * r[0] + 0.0) * r[2]) > 1.0]
    remaining = set(flat_set(tight))
    assert all(tuple(s) not in remaining for s in swerving)


def _random_case(rng):
    w = int(rng.integers(2, 5))
    h_p = int(rng.integers(1, 4))
    v_max = int(rng.integers(1, 4))
    n_levels = int(rng.integers(1, min(5, v_max + 2)))
    levels = tuple(sorted(rng.choice(np.arange(0.0, v_max + 1.0), size=n_levels,
                                     replace=False).tolist()))
    cfg = EpisodeConfig(W=w, H_s=h_p, H_p=h_p, v_max=v_max,
                        dn_max=int(rng.integers(1, 3)), move_layers=1, rng_seed=0)
    occ = (rng.random((h_p, w)) < rng.uniform(0.2, 0.8)).astype(np.int8)
    centers = lattice_centers(w)
    if rng.random() < 0.7:
        n0 = float(rng.choice(centers))
        v0 = float(rng.choice(levels))
    else:  # drifted continuous state
        n0 = float(rng.uniform(-w / 2.0, w / 2.0))
        v0 = float(rng.uniform(0, v_max))
    scene = make_scene(occ, n0=n0, v0=v0)
    scfg = SafetyConfig(tau=0.5, c_max=float(rng.uniform(0.5, 8.0)),
                        speed_levels=levels)
    return scene, cfg, scfg


def test_enumeration_matches_brute_force_oracle():
    rng = np.random.default_rng(101)
    for _ in range(150):
        scene, cfg, scfg = _random_case(rng)
        fs = enumerate_free_set(scene, cfg, scfg)
        assert flat_set(fs) == brute_force_free_set(scene, cfg, scfg)


def test_projection_matches_linear_scan_oracle():
    rng = np.random.default_rng(202)
    checked = 0
    while checked < 100:
        scene, cfg, scfg = _random_case(rng)
        fs = enumerate_free_set(scene, cfg, scfg)
        if fs.is_empty:
            continue
        a = rng.uniform(-2, 4, size=2 * cfg.H_p)
        u = project(a, fs)
        oracle = linear_scan_project(tuple(a), [tuple(r) for r in fs.flat])
        assert tuple(u) == oracle
        checked += 1


def test_projection_of_member_is_itself():
    cfg = small_config(H_p=2, H_s=2)
    scene = make_scene(np.zeros((2, 3)))
    fs = enumerate_free_set(scene, cfg, SafetyConfig())
    member = fs.flat[5].copy()
    assert np.array_equal(project(member, fs), member)


def test_projection_singleton_set():
    cfg = small_config(H_p=1, H_s=1, v_max=1)
    scene = make_scene(np.ones((1, 3)), n0=0.0, v0=1.0)
    fs = enumerate_free_set(scene, cfg, SafetyConfig())
    assert fs.count == 1
    only = fs.flat[0].copy()
    assert np.array_equal(project(np.array([37.0, -4.0]), fs), only)


def test_projection_tie_breaks_lexicographically():
    cfg = small_config(H_p=1, H_s=1)
    scene = make_scene(np.zeros((1, 3)), n0=0.0, v0=2.0)
    fs = enumerate_free_set(scene, cfg, SafetyConfig(speed_levels=(2.0,)))
    # equidistant between left (-1) and right (+1) candidates
    u = project(np.array([0.0, 2.0]), fs)
    assert tuple(u) == (0.0, 2.0)
    # remove the exact match: between -1 and +1 the smaller vector wins
    fs.flat = fs.flat[np.abs(fs.flat[:, 0]) == 1.0]
    u = project(np.array([0.0, 2.0]), fs)
    assert tuple(u) == (-1.0, 2.0)


def test_projection_errors():
    cfg = small_config(H_p=1, H_s=1)
    empty = enumerate_free_set(make_scene(np.ones((1, 3))), cfg,
                               SafetyConfig(speed_levels=(2.0,)))
    with pytest.raises(EmptyFeasibleSet):
        project(np.zeros(2), empty)
    fs = enumerate_free_set(make_scene(np.zeros((1, 3))), cfg, SafetyConfig())
    with pytest.raises(LengthMismatch):
        project(np.zeros(5), fs)


# -- the gate -------------------------------------------------------------------


def test_constrain_accepts_safe_proposal_unchanged():
    cfg = small_config(H_p=2, H_s=2)
    scene = make_scene(np.zeros((2, 3)), n0=0.0, v0=2.0)
    a = np.array([0.1, 0.2, 2.3, 2.4])  # within tau of the (0,0,2,2) member
    out = constrain(a, scene, cfg, SafetyConfig(tau=0.5))
    assert np.array_equal(out, a)  # off-lattice values pass through untouched


def test_constrain_projects_unsafe_proposal():
    cfg = small_config(H_p=1, H_s=1)
    occ = np.array([[0, 1, 0]])  # obstacle straight ahead
    scene = make_scene(occ, n0=0.0, v0=1.0)
    a = np.array([0.0, 1.0])     # steer into the obstacle at speed 1
    out = constrain(a, scene, cfg, SafetyConfig(tau=0.5))
    assert not np.array_equal(out, a)
    # nearest safe candidates are one full lattice unit away laterally
    assert tuple(out) in {(-1.0, 1.0), (1.0, 1.0)}
    assert tuple(out) == (-1.0, 1.0)  # lexicographic tie-break


def test_constrain_raises_no_path():
    cfg = small_config(H_p=1, H_s=1)
    scene = make_scene(np.ones((1, 3)), n0=0.0, v0=2.0)
    with pytest.raises(NoPathException):
        constrain(np.array([0.0, 2.0]), scene, cfg,
                  SafetyConfig(speed_levels=(2.0,)))


def test_constrain_idempotent_on_members():
    rng = np.random.default_rng(7)
    cfg = small_config(H_p=2, H_s=2)
    scfg = SafetyConfig()
    for _ in range(25):
        occ = (rng.random((2, 3)) < 0.4).astype(np.int8)
        scene = make_scene(occ, n0=float(rng.choice([-1.0, 0.0, 1.0])),
                           v0=float(rng.integers(0, 4)))
        fs = enumerate_free_set(scene, cfg, scfg)
        if fs.is_empty:
            continue
        member = fs.flat[rng.integers(fs.count)].copy()
        out = constrain(member, scene, cfg, scfg)
        assert np.array_equal(out, member)


def test_constrain_output_is_always_safe():
    rng = np.random.default_rng(31)
    hits = 0
    for _ in range(200):
        scene, cfg, scfg = _random_case(rng)
        a = rng.uniform(-2, 4, size=2 * cfg.H_p)
        try:
            out = constrain(a, scene, cfg, scfg)
        except NoPathException:
            continue
        hits += 1
        if np.array_equal(out, a):
            continue  # accepted proposals are within tau of a member
        assert tuple(out) in set(brute_force_free_set(scene, cfg, scfg))
    assert hits > 50


def test_monotonicity_obstacles_only_shrink_the_set():
    rng = np.random.default_rng(47)
    cfg = small_config(H_p=2, H_s=2)
    scfg = SafetyConfig()
    for _ in range(30):
        occ = (rng.random((2, 3)) < 0.3).astype(np.int8)
        scene = make_scene(occ.copy())
        base = set(flat_set(enumerate_free_set(scene, cfg, scfg)))
        free_cells = np.argwhere(occ == 0)
        if not len(free_cells):
            continue
        r, c = free_cells[rng.integers(len(free_cells))]
        occ[r, c] = 1
        shrunk = set(flat_set(enumerate_free_set(make_scene(occ), cfg, scfg)))
        assert shrunk <= base


def test_lexicographic_min_helper():
    rows = np.array([[1.0, 2.0], [1.0, 1.0], [0.5, 9.0]])
    assert lexicographic_min(rows) == 2
    rows = np.array([[1.0, 2.0], [1.0, 1.0]])
    assert lexicographic_min(rows) == 1


def test_safety_config_validation():
    with pytest.raises(ValueError):
        SafetyConfig(tau=0.0)
    with pytest.raises(ValueError):
        SafetyConfig(c_max=-1.0)
    with pytest.raises(ValueError):
        SafetyConfig(speed_levels=())
