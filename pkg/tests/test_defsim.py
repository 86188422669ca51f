from __future__ import annotations

import numpy as np
import pytest
from scipy import ndimage

from stagekit.defsim import (
    DefsimConfig,
    DeformationPlan,
    TriMesh,
    apply_constrained_deformation,
    compute_deformation_plan,
    embed_invasion_structure,
    label_to_mesh,
    simulate_progression,
    voxelize,
)
from stagekit.staging import classify_stage, dice_score
from stagekit.volgrid import StageLabel

SPACING = (0.5, 0.5, 0.5)


def digital_sphere(radius_mm, shape=(64, 64, 64), center_mm=(16, 16, 16), spacing=SPACING):
    ax = [(np.arange(n) + 0.5) * s for n, s in zip(shape, spacing)]
    z, y, x = np.meshgrid(*ax, indexing="ij")
    return (
        (z - center_mm[0]) ** 2 + (y - center_mm[1]) ** 2 + (x - center_mm[2]) ** 2
    ) <= radius_mm**2


def box_mesh(lo, hi):
    """Axis-aligned box as 12 consistently wound triangles, corners in mm."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array(
        [[a, b, c] for a in (lo[0], hi[0]) for b in (lo[1], hi[1]) for c in (lo[2], hi[2])]
    )
    faces = np.array(
        [
            [0, 1, 3], [0, 3, 2],  # z = lo
            [4, 6, 7], [4, 7, 5],  # z = hi
            [0, 4, 5], [0, 5, 1],  # y = lo
            [2, 3, 7], [2, 7, 6],  # y = hi
            [0, 2, 6], [0, 6, 4],  # x = lo
            [1, 5, 7], [1, 7, 3],  # x = hi
        ]
    )
    return TriMesh(corners, faces)


class TestLabelToMesh:
    def test_sphere_surface_area(self):
        mesh = label_to_mesh(digital_sphere(10.0), SPACING)
        analytic = 4 * np.pi * 10.0**2
        assert abs(mesh.surface_area() - analytic) / analytic < 0.05

    def test_watertight(self):
        mesh = label_to_mesh(digital_sphere(6.0), SPACING)
        assert mesh.is_watertight()
        assert mesh.face_areas().min() > 1e-9

    def test_too_small_mask(self):
        mask = np.zeros((8, 8, 8), bool)
        mask[4, 4, 4] = True
        with pytest.raises(ValueError, match="at least 8"):
            label_to_mesh(mask, SPACING)

    def test_multi_component_lists_count(self):
        mask = np.zeros((16, 16, 16), bool)
        mask[2:5, 2:5, 2:5] = True
        mask[10:13, 10:13, 10:13] = True
        with pytest.raises(ValueError, match="found 2"):
            label_to_mesh(mask, SPACING)


class TestVoxelize:
    def test_round_trip_10mm(self):
        sphere = digital_sphere(10.0)
        out = voxelize(label_to_mesh(sphere, SPACING), sphere.shape, SPACING)
        assert dice_score(out, sphere) >= 0.98

    def test_round_trip_5mm(self):
        sphere = digital_sphere(5.0)
        out = voxelize(label_to_mesh(sphere, SPACING), sphere.shape, SPACING)
        assert dice_score(out, sphere) >= 0.95

    def test_box_counting_oracle(self):
        mesh = box_mesh((4.0, 5.0, 6.0), (9.0, 11.0, 10.0))
        out = voxelize(mesh, (32, 32, 32), SPACING)
        box_volume = 5.0 * 6.0 * 4.0
        expected = box_volume / (0.5**3)
        surface_layer = 2 * (5 * 6 + 6 * 4 + 5 * 4) / (0.5**2)
        assert abs(out.sum() - expected) <= surface_layer

    def test_translation_equivariance_on_grid(self):
        mesh = box_mesh((4.0, 4.0, 4.0), (7.0, 8.0, 6.0))
        base = voxelize(mesh, (32, 32, 32), SPACING)
        shifted = TriMesh(mesh.vertices + np.array([0.5, 0.5, 0.5]), mesh.faces)
        out = voxelize(shifted, (32, 32, 32), SPACING)
        assert np.array_equal(out[1:, 1:, 1:], base[:-1, :-1, :-1])

    def test_out_of_grid_reports_bbox(self):
        mesh = box_mesh((-2.0, 0.0, 0.0), (4.0, 4.0, 4.0))
        with pytest.raises(ValueError, match="bounding box"):
            voxelize(mesh, (16, 16, 16), SPACING)


class TestDeformationPlan:
    def _bumped_cancer(self):
        """Cancer sphere hugging the rectum wall from outside, with a bump."""
        rectum = digital_sphere(6.0, center_mm=(16, 16, 16))
        cancer = digital_sphere(3.0, center_mm=(16, 16, 24.0))
        bump = digital_sphere(1.5, center_mm=(16, 16, 27.5))
        return rectum, cancer | bump

    def test_handle_is_bump_apex_brute_force(self):
        rectum, cancer = self._bumped_cancer()
        mesh = label_to_mesh(cancer, SPACING)
        rng = np.random.default_rng(0)
        plan = compute_deformation_plan(mesh, rectum, rng, DefsimConfig(), SPACING)
        # brute-force oracle: signed distance of every vertex to the nearest
        # rectum voxel centre
        rectum_pts = (np.argwhere(rectum) + 0.5) * 0.5
        from scipy.spatial import cKDTree

        dist, _ = cKDTree(rectum_pts).query(mesh.vertices)
        expected = int(np.argmax(dist))
        apex = mesh.vertices[expected]
        got = mesh.vertices[plan.handle_vertex]
        assert np.linalg.norm(apex - got) < 1.0
        assert abs(plan.direction @ np.array([0.0, 0.0, 1.0])) > 0.9

    def test_same_seed_identical_plan(self):
        rectum, cancer = self._bumped_cancer()
        mesh = label_to_mesh(cancer, SPACING)
        a = compute_deformation_plan(mesh, rectum, np.random.default_rng(5), DefsimConfig(), SPACING)
        b = compute_deformation_plan(mesh, rectum, np.random.default_rng(5), DefsimConfig(), SPACING)
        assert a.handle_vertex == b.handle_vertex
        assert a.displacement_mm == b.displacement_mm
        assert np.array_equal(a.fixed_vertices, b.fixed_vertices)
        assert np.array_equal(a.direction, b.direction)

    def test_interior_cancer_least_deep_vertex(self):
        rectum = digital_sphere(8.0, center_mm=(16, 16, 16))
        cancer = digital_sphere(3.0, center_mm=(16, 16, 19.0))  # fully inside
        assert not (cancer & ~rectum).any()
        mesh = label_to_mesh(cancer, SPACING)
        plan = compute_deformation_plan(mesh, rectum, np.random.default_rng(1), DefsimConfig(), SPACING)
        # least-deep vertex is the one closest to the rectum wall (largest z)
        assert mesh.vertices[plan.handle_vertex][0] == pytest.approx(16, abs=2.5)
        assert mesh.vertices[plan.handle_vertex][2] > 20.0

    def test_fixed_set_excludes_handle(self, phantom_batch):
        cfg = DefsimConfig()
        for case in phantom_batch[:6]:
            mesh = label_to_mesh(case.labels.mask("cancer"), SPACING)
            plan = compute_deformation_plan(
                mesh, case.labels.mask("rectum"), np.random.default_rng(2), cfg, SPACING
            )
            assert plan.handle_vertex not in plan.fixed_vertices

    def test_empty_rectum_errors(self):
        mesh = label_to_mesh(digital_sphere(4.0), SPACING)
        with pytest.raises(ValueError, match="empty"):
            compute_deformation_plan(
                mesh, np.zeros((64, 64, 64), bool), np.random.default_rng(0), DefsimConfig(), SPACING
            )


class TestApplyDeformation:
    def _sphere_plan(self, displacement=5.0):
        mesh = label_to_mesh(digital_sphere(8.0), SPACING)
        # handle: the vertex with the largest z; fixed: the opposite hemisphere
        handle = int(np.argmax(mesh.vertices[:, 0]))
        fixed = np.nonzero(mesh.vertices[:, 0] < 16.0)[0]
        fixed = fixed[fixed != handle]
        plan = DeformationPlan(
            handle_vertex=handle,
            direction=np.array([1.0, 0.0, 0.0]),
            displacement_mm=displacement,
            fixed_vertices=fixed,
            transition_radius_mm=10.0,
        )
        return mesh, plan

    def test_zero_displacement_identity(self):
        mesh, plan = self._sphere_plan(displacement=1e-30)
        out = apply_constrained_deformation(mesh, plan)
        assert np.abs(out.vertices - mesh.vertices).max() < 1e-9

    def test_handle_and_fixed_residuals(self):
        mesh, plan = self._sphere_plan(5.0)
        out = apply_constrained_deformation(mesh, plan)
        target = mesh.vertices[plan.handle_vertex] + 5.0 * np.array([1.0, 0.0, 0.0])
        assert np.linalg.norm(out.vertices[plan.handle_vertex] - target) < 1e-6
        moved = np.abs(out.vertices[plan.fixed_vertices] - mesh.vertices[plan.fixed_vertices])
        assert moved.max() < 1e-6
        assert np.array_equal(out.faces, mesh.faces)

    def test_free_vertices_move_smoothly(self):
        mesh, plan = self._sphere_plan(5.0)
        out = apply_constrained_deformation(mesh, plan)
        free = np.setdiff1d(
            np.arange(mesh.n_vertices), np.concatenate([[plan.handle_vertex], plan.fixed_vertices])
        )
        disp = np.linalg.norm(out.vertices[free] - mesh.vertices[free], axis=1)
        assert disp.max() < 5.0 + 1e-6  # transition stays below the handle pull
        assert disp.max() > 0.5  # and actually deforms

    def test_all_fixed_is_singular(self):
        mesh, plan = self._sphere_plan()
        plan.fixed_vertices = np.setdiff1d(np.arange(mesh.n_vertices), [plan.handle_vertex])
        with pytest.raises(ValueError, match="free"):
            apply_constrained_deformation(mesh, plan)

    def test_no_inverted_faces_on_phantoms(self, phantom_batch):
        rng = np.random.default_rng(11)
        cfg = DefsimConfig()
        for case in phantom_batch[:5]:
            mesh = label_to_mesh(case.labels.mask("cancer"), SPACING)
            plan = compute_deformation_plan(mesh, case.labels.mask("rectum"), rng, cfg, SPACING)
            out = apply_constrained_deformation(mesh, plan)
            dots = np.einsum("ij,ij->i", mesh.face_normals(), out.face_normals())
            assert (dots < 0).sum() == 0


class TestEmbedStructure:
    def test_volume_increases_by_structure_volume(self):
        mesh = label_to_mesh(digital_sphere(6.0), SPACING)
        rng = np.random.default_rng(4)
        out, info = embed_invasion_structure(mesh, rng, DefsimConfig(), return_structure=True)
        # voxelized boolean-union oracle on a common grid
        shape = (96, 96, 96)
        before = voxelize(mesh, shape, SPACING, clip=True)
        after = voxelize(out, shape, SPACING, clip=True)
        ax = [(np.arange(n) + 0.5) * 0.5 for n in shape]
        zz, yy, xx = np.meshgrid(*ax, indexing="ij")
        structure = np.zeros(shape, bool)
        for a, b, r in info["segments"]:
            a, b = np.asarray(a), np.asarray(b)
            ab = b - a
            denom = float(ab @ ab)
            pts = np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)
            if denom < 1e-12:
                d2 = ((pts - a) ** 2).sum(axis=1)
            else:
                t = np.clip((pts - a) @ ab / denom, 0, 1)
                d2 = ((pts - (a + t[:, None] * ab)) ** 2).sum(axis=1)
            structure |= (d2 <= r**2).reshape(shape)
        expected = (before | structure).sum()
        assert abs(int(after.sum()) - int(expected)) / expected < 0.10

    def test_same_seed_same_placement(self):
        mesh = label_to_mesh(digital_sphere(6.0), SPACING)
        a = embed_invasion_structure(mesh, np.random.default_rng(9), DefsimConfig())
        b = embed_invasion_structure(mesh, np.random.default_rng(9), DefsimConfig())
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.faces, b.faces)

    def test_output_watertight(self):
        mesh = label_to_mesh(digital_sphere(6.0), SPACING)
        out = embed_invasion_structure(mesh, np.random.default_rng(10), DefsimConfig())
        assert out.is_watertight()


class TestSimulateProgression:
    def test_zero_steps_identity(self, phantom_t2):
        out = simulate_progression(phantom_t2, 0, np.random.default_rng(0))
        assert np.array_equal(out.labels.data, phantom_t2.labels.data)

    def test_t2_becomes_over_t3(self, phantom_batch):
        t2_cases = [c for c in phantom_batch if c.stage is StageLabel.UNDER_T2][:3]
        for case in t2_cases:
            out = simulate_progression(case, 3, np.random.default_rng(21))
            assert classify_stage(out.labels) is StageLabel.OVER_T3
            assert out.stage is StageLabel.OVER_T3

    def test_monotone_growth_and_untouched_labels(self, phantom_t2):
        out = simulate_progression(phantom_t2, 2, np.random.default_rng(3))
        before = phantom_t2.labels.mask("cancer")
        after = out.labels.mask("cancer")
        assert after.sum() >= before.sum()
        assert not (before & ~after).any()  # strictly monotone: old cancer kept
        for name in ("mesorectum", "rectum", "bladder", "prostate", "pelvis"):
            assert np.array_equal(out.labels.mask(name), phantom_t2.labels.mask(name))

    def test_determinism(self, phantom_t2):
        a = simulate_progression(phantom_t2, 2, np.random.default_rng(8))
        b = simulate_progression(phantom_t2, 2, np.random.default_rng(8))
        assert np.array_equal(a.labels.data, b.labels.data)

    def test_provenance_record(self, phantom_t2):
        out, prov = simulate_progression(
            phantom_t2, 2, np.random.default_rng(5), return_provenance=True
        )
        assert prov["steps"] == 2
        assert len(prov["rounds"]) == 2
        assert all("displacement_mm" in r for r in prov["rounds"])
