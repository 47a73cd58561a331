import math

import numpy as np
import pytest
from scipy.spatial import cKDTree
from skimage import measure

from nexussim.errors import EmptyGrid, EmptyMask, EmptyMesh, InsufficientFrames, InsufficientPoints, StageError
from nexussim.geometry import SimTransform, angle_between
from nexussim.mesh import TriangleMesh, euler_characteristic, is_watertight
from nexussim.objfile import parse_obj
from nexussim.replica.capture import (
    Intrinsics,
    RgbdFrame,
    SyntheticScene,
    load_capture,
    look_at,
    read_pgm16,
    read_ppm,
    render_depth,
    synth_capture,
    write_pgm16,
    write_ppm,
)
from nexussim.replica.depth import reproject_depth
from nexussim.replica.masks import coarse_mask, refine_mask_morph
from nexussim.replica.pipeline import StageConfig, run_pipeline
from nexussim.replica.plane import PlaneModel, fit_plane_ransac
from nexussim.replica.postprocess import laplacian_smooth, postprocess, voxel_remesh
from nexussim.replica.tsdf import RegisteredFrame, TsdfGrid, extract_mesh, fuse_tsdf

INTR = Intrinsics(300.0, 300.0, 159.5, 119.5)
W, H = 320, 240
TABLE = PlaneModel(np.array([0.0, 1.0, 0.0]), 0.0)


def _frame(depth_mm, depth_to_color=SimTransform(), intr=INTR):
    h, w = depth_mm.shape
    color = np.zeros((h, w, 3), dtype=np.uint8)
    return RgbdFrame(color, depth_mm.astype(np.uint16), intr, intr, depth_to_color, SimTransform())


def _sphere_distance(vertices, center, radius):
    return np.abs(np.linalg.norm(vertices - center, axis=1) - radius)


def _hausdorff_to_sphere(mesh, center, radius, n=20000, seed=0):
    """Symmetric Hausdorff distance between mesh vertices and a dense sphere sample."""
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(n, 3))
    s = center + radius * s / np.linalg.norm(s, axis=1, keepdims=True)
    to_mesh = cKDTree(mesh.vertices).query(s)[0].max()
    return max(float(_sphere_distance(mesh.vertices, center, radius).max()), float(to_mesh))


# -- image IO ---------------------------------------------------------------


def test_netpbm_roundtrip(tmp_path):
    rng = np.random.default_rng(51)
    rgb = rng.integers(0, 256, (7, 9, 3)).astype(np.uint8)
    depth = rng.integers(0, 65536, (5, 4)).astype(np.uint16)
    write_ppm(tmp_path / "c.ppm", rgb)
    write_pgm16(tmp_path / "d.pgm", depth)
    np.testing.assert_array_equal(read_ppm(tmp_path / "c.ppm"), rgb)
    np.testing.assert_array_equal(read_pgm16(tmp_path / "d.pgm"), depth)
    # 16-bit samples are big-endian
    assert (tmp_path / "d.pgm").read_bytes()[-2:] == int(depth[-1, -1]).to_bytes(2, "big")


def test_pgm_header_comments(tmp_path):
    (tmp_path / "d.pgm").write_bytes(b"P5\n# comment\n2 1\n65535\n\x01\x02\x00\x05")
    np.testing.assert_array_equal(read_pgm16(tmp_path / "d.pgm"), [[0x0102, 5]])


# -- reprojection -----------------------------------------------------------


def test_reproject_identity():
    rng = np.random.default_rng(52)
    depth = rng.integers(300, 3000, (H, W)).astype(np.uint16)
    depth[rng.random((H, W)) < 0.2] = 0
    out = reproject_depth(_frame(depth))
    np.testing.assert_array_equal(out, depth)


def test_reproject_lateral_shift_closed_form():
    # fronto-parallel plane at 1 m; a 10 cm baseline shifts pixels by fx * 0.1 / 1.0
    depth = np.zeros((H, W), dtype=np.uint16)
    depth[60, 50] = 1000
    out = reproject_depth(_frame(depth, SimTransform(translation=(0.1, 0.0, 0.0))))
    shift = INTR.fx * 0.1 / 1.0
    assert shift == 30.0
    assert np.argwhere(out).tolist() == [[60, 50 + 30]]
    assert out[60, 80] == 1000


def test_reproject_full_plane_shift():
    depth = np.full((H, W), 1000, dtype=np.uint16)
    out = reproject_depth(_frame(depth, SimTransform(translation=(0.1, 0.0, 0.0))))
    assert not out[:, :30].any()
    assert (out[:, 30:] == 1000).all()


def test_reproject_zbuffer_keeps_nearer():
    # 1 m at u = 60 and 0.5 m at u = 30 both land on colour pixel u = 90
    depth = np.zeros((H, W), dtype=np.uint16)
    depth[100, 60] = 1000
    depth[100, 30] = 500
    out = reproject_depth(_frame(depth, SimTransform(translation=(0.1, 0.0, 0.0))))
    assert out[100, 90] == 500
    assert np.count_nonzero(out) == 1


def test_reproject_behind_camera_invalid():
    depth = np.full((H, W), 100, dtype=np.uint16)
    out = reproject_depth(_frame(depth, SimTransform(translation=(0.0, 0.0, -0.5))))
    assert not out.any()


# -- RANSAC -----------------------------------------------------------------


def _plane_points(rng, normal, d, n, sigma=0.0):
    normal = np.asarray(normal, dtype=float) / np.linalg.norm(normal)
    a = np.cross(normal, [0.3, 0.5, 0.7])
    a /= np.linalg.norm(a)
    b = np.cross(normal, a)
    uv = rng.uniform(-1, 1, (n, 2))
    pts = d * normal + uv[:, :1] * a + uv[:, 1:] * b
    return pts + rng.normal(0.0, sigma, (n, 1)) * normal if sigma else pts


def test_ransac_exact_plane():
    rng = np.random.default_rng(53)
    normal = np.array([0.2, 0.9, -0.3])
    pts = _plane_points(rng, normal, 0.7, 500)
    model, inliers = fit_plane_ransac(pts, rng=1)
    assert angle_between(model.normal, normal) < 1e-9 or angle_between(-model.normal, normal) < 1e-9
    assert inliers.all()


def _noisy_plane_with_outliers(seed):
    rng = np.random.default_rng(seed)
    normal = rng.normal(size=3)
    normal /= np.linalg.norm(normal)
    inl = _plane_points(rng, normal, 0.4, 2100, sigma=0.002)
    out = rng.uniform(-1.5, 1.5, (900, 3))
    pts = np.vstack([inl, out])
    truth = np.r_[np.ones(2100, bool), np.zeros(900, bool)]
    perm = rng.permutation(len(pts))
    return pts[perm], truth[perm], normal


def test_ransac_outliers_noise():
    for seed in range(5):
        pts, truth, normal = _noisy_plane_with_outliers(seed)
        model, inliers = fit_plane_ransac(pts, threshold=0.008, rng=seed)
        err = min(angle_between(model.normal, normal), angle_between(-model.normal, normal))
        assert math.degrees(err) <= 0.5
        assert np.count_nonzero(inliers & truth) / np.count_nonzero(truth) >= 0.99


def test_ransac_deterministic_per_seed():
    pts, _, _ = _noisy_plane_with_outliers(7)
    a, ia = fit_plane_ransac(pts, rng=3)
    b, ib = fit_plane_ransac(pts, rng=3)
    assert np.array_equal(a.normal, b.normal) and a.d == b.d
    assert np.array_equal(ia, ib)


def test_ransac_seed_plane_used():
    pts, _, normal = _noisy_plane_with_outliers(8)
    seed = PlaneModel(normal, 0.4)
    model, _ = fit_plane_ransac(pts, seed, iterations=0)
    assert math.degrees(angle_between(model.normal, normal)) <= 0.5


def test_ransac_degenerate_inputs():
    with pytest.raises(InsufficientPoints):
        fit_plane_ransac(np.outer(np.linspace(0, 1, 50), [1.0, 2.0, 3.0]))
    with pytest.raises(InsufficientPoints):
        fit_plane_ransac(np.zeros((2, 3)))


# -- masks ------------------------------------------------------------------


def _render_mm(scene, pose):
    z, obj = render_depth(scene, INTR, pose, W, H)
    return np.rint(z * 1000).astype(np.uint16), obj


def test_coarse_mask_matches_box_silhouette():
    scene = SyntheticScene("box")
    for pose in (look_at((0.3, 0.3, -0.35), scene.center), look_at((-0.2, 0.4, 0.3), scene.center)):
        depth, silhouette = _render_mm(scene, pose)
        mask, _ = coarse_mask(depth, INTR, pose, TABLE)
        iou = np.count_nonzero(mask & silhouette) / np.count_nonzero(mask | silhouette)
        assert iou >= 0.95


def test_bare_plane_is_empty_mask():
    scene = SyntheticScene("sphere")
    pose = look_at((1.5, 0.4, 1.5), (1.5, 0.0, 1.9))
    depth, obj = _render_mm(scene, pose)
    assert not obj.any() and depth.any()
    with pytest.raises(EmptyMask):
        coarse_mask(depth, INTR, pose, TABLE)


def test_prompt_inside_convex_masks():
    rng = np.random.default_rng(54)
    for shape in ("sphere", "box"):
        scene = SyntheticScene(shape)
        for _ in range(10):
            az, el = rng.uniform(0, 2 * np.pi), rng.uniform(0.2, 1.2)
            eye = scene.center + 0.45 * np.array([np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)])
            pose = look_at(eye, scene.center)
            depth, _ = _render_mm(scene, pose)
            mask, (u, v) = coarse_mask(depth, INTR, pose, TABLE)
            assert mask[int(round(v)), int(round(u))]


def test_mask_side_follows_camera():
    # a camera below a flipped plane sees the same foreground
    scene = SyntheticScene("sphere")
    pose = look_at((0.3, 0.3, -0.3), scene.center)
    depth, _ = _render_mm(scene, pose)
    a, _ = coarse_mask(depth, INTR, pose, TABLE)
    b, _ = coarse_mask(depth, INTR, pose, PlaneModel(np.array([0.0, -1.0, 0.0]), 0.0))
    assert np.array_equal(a, b)


def _disk_mask(shape, center, radius):
    y, x = np.ogrid[:shape[0], :shape[1]]
    return (x - center[0]) ** 2 + (y - center[1]) ** 2 <= radius ** 2


def test_refine_removes_salt_noise():
    clean = _disk_mask((120, 160), (80, 60), 25)
    rng = np.random.default_rng(55)
    noisy = clean.copy()
    salt = rng.random(clean.shape) < 0.01
    noisy |= salt & ~_disk_mask(clean.shape, (80, 60), 31)
    refined = refine_mask_morph(noisy, (80, 60))
    assert np.array_equal(refined, clean)


def test_refine_fills_pinholes():
    clean = _disk_mask((120, 160), (80, 60), 25)
    holed = clean.copy()
    holed[50, 70] = holed[65, 90] = False
    assert np.array_equal(refine_mask_morph(holed, (80, 60)), clean)


def test_refine_keeps_component_under_prompt():
    big = _disk_mask((120, 160), (40, 60), 30)
    small = _disk_mask((120, 160), (130, 60), 10)
    refined = refine_mask_morph(big | small, (130, 60))
    assert np.array_equal(refined, small)


def test_refine_idempotent_on_clean_mask():
    clean = _disk_mask((120, 160), (80, 60), 25)
    once = refine_mask_morph(clean, (80, 60))
    assert np.array_equal(once, clean)
    assert np.array_equal(refine_mask_morph(once, (80, 60)), once)


# -- fusion -----------------------------------------------------------------


def _ring_frames(scene, n, distance=0.45, elevation_deg=30.0):
    frames, masks = [], []
    el = math.radians(elevation_deg)
    for i in range(n):
        az = 2 * math.pi * i / n
        eye = scene.center + distance * np.array([math.cos(el) * math.cos(az), math.sin(el), math.cos(el) * math.sin(az)])
        pose = look_at(eye, scene.center)
        depth, obj = _render_mm(scene, pose)
        color = np.full((H, W, 3), 200, dtype=np.uint8)
        frames.append(RegisteredFrame(color, depth, INTR, pose))
        masks.append(obj)
    return frames, masks


@pytest.fixture(scope="module")
def ring():
    return _ring_frames(SyntheticScene("sphere"), 24)


def test_fused_sphere_within_two_voxels(ring):
    frames, masks = ring
    scene = SyntheticScene("sphere")
    grid = fuse_tsdf(frames, masks, voxel_size=0.005, plane=TABLE)
    mesh = extract_mesh(grid)
    assert _hausdorff_to_sphere(mesh, scene.center, scene.radius) <= 2 * 0.005
    assert is_watertight(mesh)
    assert euler_characteristic(mesh) == 2


def test_fusion_order_invariant(ring):
    frames, masks = ring
    perm = np.random.default_rng(56).permutation(len(frames))
    a = extract_mesh(fuse_tsdf(frames, masks, plane=TABLE))
    b = extract_mesh(fuse_tsdf([frames[i] for i in perm], [masks[i] for i in perm], plane=TABLE))
    assert a.vertices.shape == b.vertices.shape
    assert np.abs(a.vertices - b.vertices).max() <= 1e-5
    assert np.array_equal(a.triangles, b.triangles)


def test_fusion_weights_nonnegative_and_bounded(ring):
    frames, masks = ring
    grid = fuse_tsdf(frames, masks, plane=TABLE)
    assert (grid.weight >= 0).all()
    assert grid.tsdf.min() >= -1.0 and grid.tsdf.max() <= 1.0
    assert grid.truncation == pytest.approx(4 * grid.voxel_size)


def test_fusion_needs_eight_frames(ring):
    frames, masks = ring
    with pytest.raises(InsufficientFrames):
        fuse_tsdf(frames[:7], masks[:7])


def test_single_frame_half_shell():
    frames, masks = _ring_frames(SyntheticScene("sphere"), 1)
    grid = TsdfGrid.empty((-0.12, -0.02, -0.12), 0.005, (49, 45, 49))
    from nexussim.replica.tsdf import integrate
    integrate(grid, frames[0], masks[0])
    mesh = extract_mesh(grid)
    assert len(mesh) > 0


def test_empty_grid_raises():
    grid = TsdfGrid.empty((0, 0, 0), 0.01, (5, 5, 5))
    grid.tsdf_sum[:] = 1.0
    grid.weight[:] = 1.0
    with pytest.raises(EmptyGrid):
        extract_mesh(grid)


def test_marching_cubes_vertex_count_resolution_formula():
    # a surface of area A cut by a grid of spacing h crosses about 1.5 A / h^2 grid edges
    for h, r in ((0.005, 0.08), (0.01, 0.3), (0.002, 0.05)):
        n = int(math.ceil(2 * (r + 4 * h) / h)) + 1
        origin = -np.full(3, (n - 1) / 2 * h)
        grid = TsdfGrid.empty(origin, h, (n, n, n))
        sdf = np.linalg.norm(grid.centers(), axis=1).reshape(grid.dims) - r
        grid.tsdf_sum[:] = np.clip(sdf / grid.truncation, -1, 1)
        grid.weight[:] = 1.0
        mesh = extract_mesh(grid)
        predicted = 1.5 * 4 * math.pi * r * r / (h * h)
        assert abs(len(mesh.vertices) - predicted) <= 0.1 * predicted


def test_vertex_colours_follow_observations(ring):
    frames, masks = ring
    mesh = extract_mesh(fuse_tsdf(frames, masks, plane=TABLE))
    np.testing.assert_allclose(mesh.colors, 200 / 255, atol=1e-9)


# -- postprocess ------------------------------------------------------------


def _sdf_sphere_mesh(r, h):
    n = int(math.ceil(2 * (r + 3 * h) / h)) + 1
    ax = (np.arange(n) - (n - 1) / 2) * h
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    verts, faces, _, _ = measure.marching_cubes(np.sqrt(x * x + y * y + z * z) - r, 0.0)
    return TriangleMesh(verts * h + ax[0], faces)


def test_smoothing_reduces_jitter():
    voxel, r = 0.005, 0.08
    mesh = _sdf_sphere_mesh(r, voxel / 2)
    rng = np.random.default_rng(57)
    radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    noisy = TriangleMesh(mesh.vertices + rng.uniform(-voxel, voxel, (len(radial), 1)) * radial, mesh.triangles)
    before = _sphere_distance(noisy.vertices, np.zeros(3), r).max()
    after = _sphere_distance(postprocess(noisy, voxel).vertices, np.zeros(3), r).max()
    assert after * 3 <= before


def test_cube_remesh_watertight_genus_zero():
    v = np.array([(x, y, z) for x in (0, 0.1) for y in (0, 0.1) for z in (0, 0.1)], dtype=float)
    f = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5), (0, 4, 5), (0, 5, 1),
         (2, 3, 7), (2, 7, 6), (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]
    out = postprocess(TriangleMesh(v, f), 0.01)
    assert is_watertight(out)
    assert euler_characteristic(out) == 2
    lo, hi = out.vertices.min(axis=0), out.vertices.max(axis=0)
    np.testing.assert_allclose(lo, 0.0, atol=0.01)
    np.testing.assert_allclose(hi, 0.1, atol=0.01)


def test_zero_lambda_is_remesh_only():
    mesh = _sdf_sphere_mesh(0.05, 0.004)
    plain = voxel_remesh(mesh, 0.005)
    out = postprocess(mesh, 0.005, lam=0.0)
    np.testing.assert_array_equal(out.vertices, plain.vertices)
    np.testing.assert_array_equal(out.triangles, plain.triangles)


def test_laplacian_single_step_by_hand():
    v = np.array([(0, 0, 0), (1, 0, 0), (0, 1, 0)], dtype=float)
    out = laplacian_smooth(v, np.array([(0, 1, 2)]), iterations=1, lam=0.5)
    # each vertex moves halfway to the mean of the other two
    expected = v + 0.5 * (np.array([(0.5, 0.5, 0), (0, 0.5, 0), (0.5, 0, 0)]) - v)
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_postprocess_empty_mesh():
    with pytest.raises(EmptyMesh):
        postprocess(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)), 0.005)


# -- pipeline ---------------------------------------------------------------


@pytest.fixture(scope="module")
def small_capture(tmp_path_factory):
    root = tmp_path_factory.mktemp("capture")
    synth_capture(root, "sphere", n_frames=24, seed=3)
    return root


@pytest.fixture(scope="module")
def small_result(small_capture):
    return run_pipeline(small_capture)


def test_pipeline_sphere_obj_parses(small_result):
    doc = parse_obj(small_result.obj_bytes)
    mesh = doc.to_mesh()
    center = SyntheticScene("sphere").center
    assert is_watertight(mesh) and euler_characteristic(mesh) == 2
    assert _hausdorff_to_sphere(mesh, center, 0.08) <= 2 * 0.005
    assert doc.colors is not None


def test_pipeline_timing_report(small_result):
    t = small_result.timings
    assert list(t["stages"]) == ["load", "reproject", "plane", "coarse", "refine", "pose", "reconstruct",
                                 "extract", "postprocess", "obj"]
    assert abs(sum(t["stages"].values()) - t["total"]) <= 0.05 * t["total"]
    assert t["frames"] == 24


def test_pipeline_surface_not_below_plane(small_result):
    plane = small_result.plane
    side = 1.0 if plane.normal[1] > 0 else -1.0
    assert (side * plane.signed_distance(small_result.document.vertices)).min() >= -plane.inlier_threshold


def test_pipeline_deterministic(small_capture, small_result):
    assert run_pipeline(small_capture).obj_bytes == small_result.obj_bytes


def test_pipeline_identity_refine(small_capture):
    res = run_pipeline(small_capture, StageConfig(refine="identity"))
    assert len(res.document.faces) > 0


def test_pipeline_parallel_matches_serial(small_capture, small_result):
    assert run_pipeline(small_capture, StageConfig(workers=4)).obj_bytes == small_result.obj_bytes


def test_pipeline_four_frames_fail_at_reconstruct(tmp_path):
    synth_capture(tmp_path, "sphere", n_frames=4, seed=1)
    with pytest.raises(StageError) as info:
        run_pipeline(tmp_path)
    assert info.value.stage == "reconstruct"
    assert isinstance(info.value.cause, InsufficientFrames)


def test_pipeline_bad_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text('{"frames": "nope"}')
    with pytest.raises(StageError) as info:
        run_pipeline(tmp_path)
    assert info.value.stage == "load"


def test_pipeline_unknown_stage(small_capture):
    with pytest.raises(StageError) as info:
        run_pipeline(small_capture, StageConfig(refine="sam"))
    assert info.value.stage == "refine"


def test_pipeline_external_reconstructor(small_capture, tmp_path):
    # a stand-in external tool that writes a tetrahedron
    script = tmp_path / "recon.py"
    script.write_text(
        "import sys\n"
        "open(sys.argv[2], 'w').write('v 0 0 0\\nv 0.05 0 0\\nv 0 0.05 0\\nv 0 0 0.05\\n'\n"
        "                             'f 1 3 2\\nf 1 2 4\\nf 1 4 3\\nf 2 3 4\\n')\n")
    import sys
    res = run_pipeline(small_capture, StageConfig(reconstruct=f"external:{sys.executable} {script}"))
    assert len(res.document.faces) > 0


def test_capture_manifest_roundtrip(small_capture):
    m = load_capture(small_capture)
    assert len(m.frames) == 24
    frame = m.load_frame(0)
    assert frame.color.shape == (240, 320, 3)
    assert frame.depth.dtype == np.uint16
