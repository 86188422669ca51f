"""Advanced-cancer label synthesis by constrained mesh deformation.

Pipeline per progression step: cancer mask -> surface mesh (marching cubes)
-> deformation plan (furthest invasion point, infiltration direction,
non-deformable part) -> bi-Laplacian handle deformation -> optional
tubular/spherical structure embedding -> voxelization back onto the grid.

Meshes live in physical millimetres, ordered (z, y, x) like the volumes,
with voxel i centred at (i + 0.5) * spacing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.csgraph import dijkstra
from scipy.sparse.linalg import spsolve
from skimage.measure import marching_cubes

from .staging import classify_stage
from .volgrid import Case, ImageVolume, LabelVolume, Role, StageLabel


@dataclass
class TriMesh:
    vertices: np.ndarray  # (N, 3) float64, physical mm, (z, y, x)
    faces: np.ndarray  # (M, 3) int vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def edge_face_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for tri in self.faces:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        return all(c == 2 for c in self.edge_face_counts().values())

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        e1 = v[self.faces[:, 1]] - v[self.faces[:, 0]]
        e2 = v[self.faces[:, 2]] - v[self.faces[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def face_normals(self) -> np.ndarray:
        v = self.vertices
        e1 = v[self.faces[:, 1]] - v[self.faces[:, 0]]
        e2 = v[self.faces[:, 2]] - v[self.faces[:, 0]]
        n = np.cross(e1, e2)
        norms = np.linalg.norm(n, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return n / norms

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals, oriented outward."""
        v = self.vertices
        e1 = v[self.faces[:, 1]] - v[self.faces[:, 0]]
        e2 = v[self.faces[:, 2]] - v[self.faces[:, 0]]
        fn = np.cross(e1, e2)  # area-weighted
        if self.signed_volume() < 0:
            fn = -fn
        normals = np.zeros_like(v)
        for k in range(3):
            np.add.at(normals, self.faces[:, k], fn)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return normals / norms

    def signed_volume(self) -> float:
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


@dataclass
class DeformationPlan:
    handle_vertex: int
    direction: np.ndarray  # unit 3-vector, (z, y, x)
    displacement_mm: float
    fixed_vertices: np.ndarray  # sorted vertex indices
    transition_radius_mm: float

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("direction must be unit-norm")
        self.fixed_vertices = np.unique(np.asarray(self.fixed_vertices, dtype=np.int64))
        if self.displacement_mm <= 0:
            raise ValueError("displacement_mm must be positive")
        if self.handle_vertex in self.fixed_vertices:
            raise ValueError("handle vertex cannot be fixed")


@dataclass
class DefsimConfig:
    displacement_range_mm: tuple[float, float] = (2.0, 10.0)
    transition_fraction: float = 0.6  # of geodesic eccentricity, unless radius given
    transition_radius_mm: float | None = None
    embed_prob: float = 0.3
    steps: int = 3
    tube_radius_mm: tuple[float, float] = (1.0, 3.0)
    tube_length_mm: tuple[float, float] = (5.0, 15.0)
    sphere_radius_mm: tuple[float, float] = (2.0, 6.0)
    sphere_offset_mm: tuple[float, float] = (5.0, 15.0)
    connector_radius_mm: float = 1.0
    embed_voxel_mm: float = 0.5
    smoothing_sigma_vox: float = 1.0
    weighting: str = "cotangent"  # "cotangent" or "uniform"
    max_embed_attempts: int = 10
    max_redraws: int = 5


# ---------------------------------------------------------------------------
# Label <-> mesh conversion
# ---------------------------------------------------------------------------


def label_to_mesh(mask: np.ndarray, spacing_mm, smoothing_sigma_vox: float = 1.0) -> TriMesh:
    """Extract the 0.5-isosurface of a single-component binary mask.

    The mask is lightly Gaussian-smoothed before extraction so the surface
    approximates the underlying smooth shape instead of the voxel staircase;
    smoothing falls back to none when it would erase the 0.5 level set.
    """
    mask = np.asarray(mask, dtype=bool)
    n_vox = int(mask.sum())
    if n_vox < 8:
        raise ValueError(f"mask has {n_vox} voxels, need at least 8")
    _, n_comp = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    if n_comp != 1:
        raise ValueError(f"mask must be a single connected component, found {n_comp}")
    spacing = tuple(float(s) for s in spacing_mm)

    padded = np.pad(mask.astype(np.float32), 2)
    field_ = padded
    if smoothing_sigma_vox > 0:
        smoothed = ndimage.gaussian_filter(padded, smoothing_sigma_vox)
        if smoothed.max() > 0.5:
            field_ = smoothed
    verts, faces, _, _ = marching_cubes(field_, level=0.5, spacing=spacing)
    # Undo the 2-voxel pad and shift grid indices to voxel-centre coordinates.
    verts = verts - np.array(spacing) * 1.5
    return TriMesh(verts, np.ascontiguousarray(faces))


def voxelize(mesh: TriMesh, shape, spacing_mm, clip: bool = False) -> np.ndarray:
    """Rasterize a watertight mesh: voxel centres classified by ray-crossing parity.

    Rays run along z through every (y, x) voxel-centre column (with a tiny
    deterministic offset so rays never hit vertices or edges exactly). With
    clip=False a mesh extending outside the grid is an error.
    """
    shape = tuple(int(s) for s in shape)
    spacing = tuple(float(s) for s in spacing_mm)
    bounds = np.array([n * s for n, s in zip(shape, spacing)])
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    if not clip and (np.any(lo < 0) or np.any(hi > bounds)):
        raise ValueError(
            f"mesh bounding box [{lo.round(2)}, {hi.round(2)}]mm exceeds grid "
            f"[0, {bounds.round(2)}]mm"
        )

    tri = mesh.vertices[mesh.faces]  # (M, 3, 3) in (z, y, x)
    out = np.zeros(shape, dtype=bool)
    z_centers = (np.arange(shape[0]) + 0.5) * spacing[0]
    for eps_scale in (1.0, 3.7, 9.1):  # retry ladder for degenerate alignments
        eps_y = 1e-4 * spacing[1] * eps_scale
        eps_x = 2.3e-4 * spacing[2] * eps_scale
        crossings: dict[tuple[int, int], list[float]] = {}
        ok = _collect_crossings(tri, shape, spacing, eps_y, eps_x, crossings)
        if not ok:
            continue
        out[:] = False
        for (iy, ix), zs in crossings.items():
            zs = np.sort(np.asarray(zs))
            for k in range(0, len(zs) - 1, 2):
                out[:, iy, ix] |= (z_centers >= zs[k]) & (z_centers <= zs[k + 1])
        return out
    raise ValueError("voxelization failed: degenerate ray/triangle alignment persisted")


def _collect_crossings(tri, shape, spacing, eps_y, eps_x, crossings) -> bool:
    """Gather ray/triangle z-crossings per (y, x) column; False when some
    column ends with an odd crossing count (degenerate geometry)."""
    for t in tri:
        z0, z1, z2 = t[:, 0]
        p = t[:, 1:]  # (3, 2) -> (y, x) per vertex
        ymin, ymax = p[:, 0].min(), p[:, 0].max()
        xmin, xmax = p[:, 1].min(), p[:, 1].max()
        iy0 = max(int(np.ceil((ymin - eps_y) / spacing[1] - 0.5)), 0)
        iy1 = min(int(np.floor((ymax - eps_y) / spacing[1] - 0.5)), shape[1] - 1)
        ix0 = max(int(np.ceil((xmin - eps_x) / spacing[2] - 0.5)), 0)
        ix1 = min(int(np.floor((xmax - eps_x) / spacing[2] - 0.5)), shape[2] - 1)
        if iy0 > iy1 or ix0 > ix1:
            continue
        ys = (np.arange(iy0, iy1 + 1) + 0.5) * spacing[1] + eps_y
        xs = (np.arange(ix0, ix1 + 1) + 0.5) * spacing[2] + eps_x
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        d = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
        if d == 0:
            continue  # triangle parallel to z-rays: never a transversal crossing
        w1 = ((yy - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (xx - p[0, 1])) / d
        w2 = ((p[1, 0] - p[0, 0]) * (xx - p[0, 1]) - (yy - p[0, 0]) * (p[1, 1] - p[0, 1])) / d
        w0 = 1.0 - w1 - w2
        inside = (w0 > 0) & (w1 > 0) & (w2 > 0)
        if not inside.any():
            continue
        boundary = (
            (np.abs(w0) < 1e-12) | (np.abs(w1) < 1e-12) | (np.abs(w2) < 1e-12)
        ) & ~inside
        if boundary.any():
            return False  # grazing hit: retry with another epsilon
        zc = w0 * z0 + w1 * z1 + w2 * z2
        iys, ixs = np.nonzero(inside)
        for iy, ix, z in zip(iys, ixs, zc[inside]):
            crossings.setdefault((iy0 + iy, ix0 + ix), []).append(float(z))
    return all(len(zs) % 2 == 0 for zs in crossings.values())


# ---------------------------------------------------------------------------
# Deformation planning and solving
# ---------------------------------------------------------------------------


def _signed_distance_field(mask: np.ndarray, spacing) -> np.ndarray:
    """Positive outside the mask, negative inside, in millimetres."""
    outside = ndimage.distance_transform_edt(~mask, sampling=spacing)
    inside = ndimage.distance_transform_edt(mask, sampling=spacing)
    return outside - inside


def _sample_trilinear(field_: np.ndarray, points_mm: np.ndarray, spacing) -> np.ndarray:
    idx = points_mm / np.asarray(spacing) - 0.5
    return ndimage.map_coordinates(field_, idx.T, order=1, mode="nearest")


def _geodesic_from(mesh: TriMesh, source: int) -> np.ndarray:
    v = mesh.vertices
    i = np.concatenate([mesh.faces[:, 0], mesh.faces[:, 1], mesh.faces[:, 2]])
    j = np.concatenate([mesh.faces[:, 1], mesh.faces[:, 2], mesh.faces[:, 0]])
    w = np.linalg.norm(v[i] - v[j], axis=1)
    n = mesh.n_vertices
    graph = sparse.coo_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n)).tocsr()
    return dijkstra(graph, directed=False, indices=source)


def compute_deformation_plan(
    cancer_mesh: TriMesh,
    rectum_mask: np.ndarray,
    rng: np.random.Generator,
    cfg: DefsimConfig | None = None,
    spacing_mm=(0.5, 0.5, 0.5),
) -> DeformationPlan:
    """Derive handle, infiltration direction and non-deformable part from morphology.

    The handle is the cancer vertex with the largest signed distance outside
    the rectum surface (for a fully interior cancer that is the least-deep
    vertex); the direction is the rectum surface's outward normal nearest the
    handle; vertices geodesically farther than the transition radius are fixed.
    """
    cfg = cfg or DefsimConfig()
    rectum_mask = np.asarray(rectum_mask, dtype=bool)
    if not rectum_mask.any():
        raise ValueError("rectum mask is empty")
    spacing = tuple(float(s) for s in spacing_mm)

    sdf = _signed_distance_field(rectum_mask, spacing)
    sdf_smooth = ndimage.gaussian_filter(sdf, 1.0)
    depth = _sample_trilinear(sdf, cancer_mesh.vertices, spacing)
    handle = int(np.argmax(depth))

    grad = np.stack(np.gradient(sdf_smooth, *spacing))
    direction = np.array(
        [_sample_trilinear(grad[k], cancer_mesh.vertices[handle : handle + 1], spacing)[0] for k in range(3)]
    )
    norm = np.linalg.norm(direction)
    if norm < 1e-9:
        centroid_vox = np.array(ndimage.center_of_mass(rectum_mask))
        centroid = (centroid_vox + 0.5) * np.asarray(spacing)
        direction = cancer_mesh.vertices[handle] - centroid
        norm = np.linalg.norm(direction)
        if norm < 1e-9:
            raise ValueError("cannot derive an infiltration direction")
    direction = direction / norm

    geo = _geodesic_from(cancer_mesh, handle)
    finite = np.isfinite(geo)
    eccentricity = float(geo[finite].max())
    radius = cfg.transition_radius_mm
    if radius is None:
        radius = cfg.transition_fraction * eccentricity
    radius = min(radius, 0.95 * eccentricity)
    fixed = np.nonzero(finite & (geo > radius))[0]
    if len(fixed) == 0:
        fixed = np.array([int(np.argmax(np.where(finite, geo, -np.inf)))])

    displacement = float(rng.uniform(*cfg.displacement_range_mm))
    return DeformationPlan(
        handle_vertex=handle,
        direction=direction,
        displacement_mm=displacement,
        fixed_vertices=fixed,
        transition_radius_mm=float(radius),
    )


def _cotangent_laplacian(mesh: TriMesh) -> sparse.csr_matrix:
    v = mesh.vertices
    f = mesh.faces
    n = mesh.n_vertices
    rows, cols, vals = [], [], []
    for a, b, c in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        # cot of the angle at vertex `a`, opposite edge (b, c)
        u = v[f[:, b]] - v[f[:, a]]
        w = v[f[:, c]] - v[f[:, a]]
        cross = np.linalg.norm(np.cross(u, w), axis=1)
        cross = np.maximum(cross, 1e-12)
        cot = np.einsum("ij,ij->i", u, w) / cross
        half = 0.5 * cot
        rows.extend([f[:, b], f[:, c]])
        cols.extend([f[:, c], f[:, b]])
        vals.extend([half, half])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    w_mat = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    diag = np.asarray(w_mat.sum(axis=1)).ravel()
    return sparse.diags(diag) - w_mat


def _uniform_laplacian(mesh: TriMesh) -> sparse.csr_matrix:
    n = mesh.n_vertices
    i = np.concatenate([mesh.faces[:, 0], mesh.faces[:, 1], mesh.faces[:, 2]])
    j = np.concatenate([mesh.faces[:, 1], mesh.faces[:, 2], mesh.faces[:, 0]])
    ones = np.ones(len(i))
    adj = sparse.coo_matrix(
        (np.concatenate([ones, ones]), (np.concatenate([i, j]), np.concatenate([j, i]))),
        shape=(n, n),
    ).tocsr()
    adj.data[:] = 1.0
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return sparse.diags(deg) - adj


def apply_constrained_deformation(
    mesh: TriMesh, plan: DeformationPlan, weighting: str = "cotangent"
) -> TriMesh:
    """Solve the bi-Laplacian (thin-shell) displacement system with hard constraints.

    Fixed vertices are pinned (zero displacement) and the handle is displaced
    by displacement_mm * direction; the smooth transition region in between is
    the minimizer of the squared-Laplacian energy of the displacement field.
    Connectivity is unchanged, constraints are met exactly.
    """
    n = mesh.n_vertices
    if plan.handle_vertex >= n or (len(plan.fixed_vertices) and plan.fixed_vertices.max() >= n):
        raise ValueError("plan indexes vertices outside the mesh")
    constrained = np.concatenate([[plan.handle_vertex], plan.fixed_vertices]).astype(np.int64)
    if len(constrained) >= n:
        raise ValueError("no free vertices: every vertex is constrained")

    lap = _cotangent_laplacian(mesh) if weighting == "cotangent" else _uniform_laplacian(mesh)
    if not np.all(np.isfinite(lap.data)):
        lap = _uniform_laplacian(mesh)
    k_mat = (lap @ lap).tocsr()

    disp_c = np.zeros((len(constrained), 3))
    disp_c[0] = plan.displacement_mm * plan.direction
    free = np.setdiff1d(np.arange(n), constrained)
    k_ff = k_mat[np.ix_(free, free)]
    k_fc = k_mat[np.ix_(free, constrained)]
    disp = np.zeros((n, 3))
    disp[constrained] = disp_c
    disp[free] = spsolve(k_ff.tocsc(), -k_fc @ disp_c)
    if not np.all(np.isfinite(disp)):
        raise ValueError("deformation solve produced non-finite displacements")
    return TriMesh(mesh.vertices + disp, mesh.faces.copy())


# ---------------------------------------------------------------------------
# Structure embedding
# ---------------------------------------------------------------------------


def _capsule_mask(coords, a, b, radius) -> np.ndarray:
    """Voxels within `radius` of segment a-b (a capsule)."""
    ab = b - a
    denom = float(ab @ ab)
    p = np.stack([c.ravel() for c in coords], axis=1)
    if denom < 1e-12:
        d2 = ((p - a) ** 2).sum(axis=1)
    else:
        t = np.clip((p - a) @ ab / denom, 0.0, 1.0)
        d2 = ((p - (a + t[:, None] * ab)) ** 2).sum(axis=1)
    return (d2 <= radius**2).reshape(coords[0].shape)


def embed_invasion_structure(
    mesh: TriMesh,
    rng: np.random.Generator,
    cfg: DefsimConfig | None = None,
    return_structure: bool = False,
):
    """Union the surface with a random tubular or spherical invasion structure.

    The structure is rooted at a random surface vertex along its outward
    normal; the union is carried out on a fine local voxel grid and the
    result re-extracted as a single watertight surface. Disconnected unions
    are redrawn up to cfg.max_embed_attempts times.
    """
    cfg = cfg or DefsimConfig()
    if not mesh.is_watertight():
        raise ValueError("embed_invasion_structure requires a watertight mesh")
    normals = mesh.vertex_normals()
    s = cfg.embed_voxel_mm

    for _ in range(cfg.max_embed_attempts):
        root_idx = int(rng.integers(mesh.n_vertices))
        root = mesh.vertices[root_idx]
        normal = normals[root_idx]
        kind = "tube" if rng.uniform() < 0.5 else "sphere"
        if kind == "tube":
            radius = float(rng.uniform(*cfg.tube_radius_mm))
            length = float(rng.uniform(*cfg.tube_length_mm))
            segments = [(root, root + normal * length, radius)]
            far_point = root + normal * (length + radius)
            max_r = radius
        else:
            radius = float(rng.uniform(*cfg.sphere_radius_mm))
            offset = float(rng.uniform(*cfg.sphere_offset_mm))
            center = root + normal * offset
            segments = [(center, center, radius), (root, center, cfg.connector_radius_mm)]
            far_point = center + normal * radius
            max_r = radius

        lo = np.minimum(mesh.vertices.min(axis=0), far_point - max_r) - 2 * s
        hi = np.maximum(mesh.vertices.max(axis=0), far_point + max_r) + 2 * s
        shape = tuple(int(np.ceil((h - l) / s)) for l, h in zip(lo, hi))
        local = TriMesh(mesh.vertices - lo, mesh.faces)
        vox = voxelize(local, shape, (s, s, s))
        coords = np.meshgrid(*[(np.arange(n) + 0.5) * s for n in shape], indexing="ij")
        for a, b, r in segments:
            vox |= _capsule_mask(coords, a - lo, b - lo, r)
        _, n_comp = ndimage.label(vox, structure=np.ones((3, 3, 3)))
        if n_comp != 1:
            continue
        merged = label_to_mesh(vox, (s, s, s), smoothing_sigma_vox=cfg.smoothing_sigma_vox)
        merged = TriMesh(merged.vertices + lo, merged.faces)
        if return_structure:
            info = {"kind": kind, "root": root.tolist(), "radius": radius,
                    "segments": [(a.tolist(), b.tolist(), r) for a, b, r in segments]}
            return merged, info
        return merged
    raise ValueError(f"embedding produced a disconnected union {cfg.max_embed_attempts} times")


# ---------------------------------------------------------------------------
# Progression simulation
# ---------------------------------------------------------------------------


def simulate_progression(
    case: Case,
    steps: int,
    rng: np.random.Generator,
    cfg: DefsimConfig | None = None,
    return_provenance: bool = False,
):
    """Grow the cancer label by repeated plan->deform->(embed)->voxelize rounds.

    Only the cancer bit changes; every other label is untouched. Cancer growth
    is monotone (each round is unioned with the previous mask). After steps>0
    rounds the result must classify OVER_T3, otherwise the whole simulation is
    redrawn (up to cfg.max_redraws); the returned case has role GENERATED and a
    zero placeholder image for the synthesis stage to fill.
    """
    cfg = cfg or DefsimConfig()
    if case.labels is None:
        raise ValueError("simulate_progression needs a fully labelled case")
    if not case.labels.mask("cancer").any():
        raise ValueError("cancer label is empty")
    spacing = case.labels.spacing_mm
    shape = case.labels.shape
    rectum = case.labels.mask("rectum")

    provenance: dict = {"steps": steps, "redraws": 0, "rounds": []}
    for attempt in range(cfg.max_redraws + 1):
        cancer = case.labels.mask("cancer").copy()
        rounds = []
        for _ in range(steps):
            mesh = label_to_mesh(cancer, spacing, cfg.smoothing_sigma_vox)
            plan = compute_deformation_plan(mesh, rectum, rng, cfg, spacing)
            mesh = apply_constrained_deformation(mesh, plan, cfg.weighting)
            embedded = bool(rng.uniform() < cfg.embed_prob)
            if embedded:
                mesh = embed_invasion_structure(mesh, rng, cfg)
            cancer = cancer | voxelize(mesh, shape, spacing, clip=True)
            rounds.append(
                {
                    "handle_vertex": plan.handle_vertex,
                    "direction": plan.direction.tolist(),
                    "displacement_mm": plan.displacement_mm,
                    "n_fixed": int(len(plan.fixed_vertices)),
                    "transition_radius_mm": plan.transition_radius_mm,
                    "embedded": embedded,
                }
            )

        labels = LabelVolume(case.labels.data.copy(), spacing)
        labels.set_mask("cancer", cancer)
        stage = classify_stage(labels)
        if steps == 0 or stage is StageLabel.OVER_T3:
            provenance["rounds"] = rounds
            provenance["redraws"] = attempt
            out = Case(
                id=f"{case.id}-prog",
                image=ImageVolume(np.zeros(shape, dtype=np.float32), spacing),
                labels=labels,
                stage=stage,
                role=Role.GENERATED,
            )
            return (out, provenance) if return_provenance else out
    raise ValueError(
        f"progression failed to reach OVER_T3 after {cfg.max_redraws} redraws (case {case.id})"
    )
