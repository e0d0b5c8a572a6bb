import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import analytic_batch, angle_between, encode, fd_gradient, plane_field, sphere_field, unit
from raydf.dataset import denormalize_rays
from raydf.errors import (
    BehindCamera,
    DegenerateRay,
    NegativeResult,
    NoIntersection,
    OriginInside,
    PointOutsideSphere,
    PoleSingularity,
)
from raydf.geometry import (
    BoundingSphere,
    Camera,
    Ray,
    RaySample,
    depth_to_distance,
    derive_normal,
    derive_normals,
    parameterize_ray,
    parameterize_rays,
    pixel_ray,
    pixel_rays,
    ray_to_points,
    rays_to_points,
    reproject,
    sample_multiview_batch,
    sample_multiview_rays,
    transformation_residual,
)

UNIT = BoundingSphere(np.zeros(3), 2.0)
PI = np.pi


def identity_cam(t=(0, 0, -2), f=32.0, size=64):
    return Camera(np.eye(3), np.asarray(t, float), f, size / 2, size / 2, size, size)


class TestParameterizeRay:
    def test_axis_ray(self):
        ray, d0 = parameterize_ray([0, 0, -2], [0, 0, 1], UNIT)
        np.testing.assert_allclose(ray, [PI, 0, 0, 0], atol=1e-15)
        assert d0 == pytest.approx(1.0)

    def test_equatorial_ray(self):
        ray, d0 = parameterize_ray([-2, 0, 0], [1, 0, 0], UNIT)
        np.testing.assert_allclose(ray, [PI / 2, PI, PI / 2, 0], atol=1e-15)
        assert d0 == pytest.approx(1.0)

    def test_miss(self):
        with pytest.raises(NoIntersection):
            parameterize_ray([0, 0, -2], [1, 0, 0], UNIT)

    def test_tangent_is_a_miss(self):
        with pytest.raises(NoIntersection):
            parameterize_ray([-2, 1, 0], [1, 0, 0], UNIT)

    def test_origin_inside(self):
        with pytest.raises(OriginInside):
            parameterize_ray([0, 0, 0.5], [0, 0, 1], UNIT)

    def test_origin_on_sphere(self):
        ray, d0 = parameterize_ray([0, 0, -1], [0, 0, 1], UNIT)
        assert d0 == pytest.approx(0.0)
        assert ray.theta_out == pytest.approx(0.0)

    def test_phi_range(self):
        # entry at phi = -pi must fold to +pi
        ray, _ = parameterize_ray([-2, -0.0, 0], [1, 0, 0], UNIT)
        assert ray.phi_in == pytest.approx(PI)


class TestRayToPoints:
    def test_axis(self):
        p_in, p_out, m = ray_to_points(Ray(PI, 0, 0, 0), UNIT)
        np.testing.assert_allclose(p_in, [0, 0, -1], atol=1e-15)
        np.testing.assert_allclose(p_out, [0, 0, 1], atol=1e-15)
        np.testing.assert_allclose(m, [0, 0, 1], atol=1e-15)

    def test_equator(self):
        _, _, m = ray_to_points(Ray(PI / 2, PI, PI / 2, 0), UNIT)
        np.testing.assert_allclose(m, [1, 0, 0], atol=1e-15)

    def test_degenerate(self):
        with pytest.raises(DegenerateRay):
            ray_to_points(Ray(1.0, 0.5, 1.0, 0.5), UNIT)

    def test_round_trip_1000(self):
        rng = np.random.default_rng(1)
        sph = BoundingSphere(np.array([0.3, -0.2, 0.1]), 1.7)
        o = sph.center + unit(rng.standard_normal((1000, 3))) * rng.uniform(1.0, 3.0, (1000, 1))
        target = sph.center + unit(rng.standard_normal((1000, 3))) * rng.uniform(0, 0.8, (1000, 1))
        m = unit(target - o)
        rays, d0, ok = parameterize_rays(o, m, sph)
        assert ok.all()
        p_in, _, m2 = rays_to_points(rays, sph)
        np.testing.assert_allclose(m2, m, atol=1e-12)
        np.testing.assert_allclose(o + d0[:, None] * m, p_in, atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.05, 3.09), st.floats(-3.1, 3.1), st.floats(0.05, 3.09), st.floats(-3.1, 3.1))
    def test_points_lie_on_sphere(self, t1, f1, t2, f2):
        ray = Ray(t1, f1, t2, f2)
        try:
            p_in, p_out, m = ray_to_points(ray, UNIT)
        except DegenerateRay:
            return
        assert np.linalg.norm(p_in) == pytest.approx(1.0)
        assert np.linalg.norm(p_out) == pytest.approx(1.0)
        assert np.linalg.norm(m) == pytest.approx(1.0)


class TestDepthToDistance:
    def test_principal_point(self):
        cam = identity_cam()
        assert depth_to_distance(3.0, cam.cy, cam.cx, cam, 1.25) == 3.0 - 1.25

    def test_45_degree_pixel(self):
        cam = Camera(np.eye(3), np.zeros(3), 100.0, 150.0, 150.0, 300, 300)
        assert depth_to_distance(1.0, cam.cy, cam.cx + 100, cam, 0.0) == pytest.approx(np.sqrt(2))

    def test_negative(self):
        cam = identity_cam()
        with pytest.raises(NegativeResult):
            depth_to_distance(0.5, cam.cy, cam.cx, cam, 1.0)


class TestPixelRay:
    def test_principal_pixel_matches_axis_ray(self):
        cam = identity_cam()
        ray, d0 = pixel_ray(cam.cy, cam.cx, cam, UNIT)
        ref, ref_d0 = parameterize_ray([0, 0, -2], [0, 0, 1], UNIT)
        np.testing.assert_allclose(ray, ref, atol=1e-12)
        assert d0 == pytest.approx(ref_d0)

    def test_full_frustum_hits(self):
        # narrow field of view: the sphere fills the whole 64x64 frame
        cam = Camera.look_at([0, 0, -3], [0, 0, 0], [0, 1, 0], 400.0, 64, 64)
        for u in range(64):
            for v in range(64):
                pixel_ray(u, v, cam, UNIT)

    def test_distinct_pixels_distinct_rays(self):
        cam = identity_cam()
        rays, _, ok, _ = pixel_rays(cam, UNIT)
        flat = rays[ok]
        assert len(np.unique(flat, axis=0)) == len(flat)


class TestReproject:
    def test_optical_axis(self):
        cam = Camera(np.eye(3), np.zeros(3), 50.0, 31.5, 23.5, 64, 48)
        u, v, z, inside = reproject(np.array([0, 0, 1.0]), cam)
        assert (u, v, z) == (cam.cy, cam.cx, 1.0)
        assert inside

    def test_round_trip(self):
        cam = Camera.look_at([0.4, -1.5, 0.7], [0, 0, 0], [0, 0, 1], 60.0, 64, 64)
        rng = np.random.default_rng(0)
        for _ in range(100):
            u, v = rng.uniform(0, 63, 2)
            depth = rng.uniform(0.5, 3.0)
            local = np.array([(u - cam.cy) / cam.f, (v - cam.cx) / cam.f, 1.0]) * depth
            p = cam.R @ local + cam.t
            u2, v2, z, _ = reproject(p, cam)
            assert abs(u2 - u) < 1e-6 and abs(v2 - v) < 1e-6
            assert z == pytest.approx(depth)

    def test_behind(self):
        with pytest.raises(BehindCamera):
            reproject(np.array([0, 0, -1.0]), Camera(np.eye(3), np.zeros(3), 50.0, 32, 32, 64, 64))

    def test_out_of_frame_is_flag(self):
        cam = Camera(np.eye(3), np.zeros(3), 50.0, 32, 32, 64, 64)
        *_, inside = reproject(np.array([5.0, 0, 1.0]), cam)
        assert not inside


class TestMultiview:
    def test_center_point(self):
        for ray, dt in sample_multiview_rays(np.zeros(3), 50, UNIT, 3):
            assert dt == pytest.approx(1.0)
            p_in, _, m = ray_to_points(ray, UNIT)
            np.testing.assert_allclose(p_in + dt * m, 0, atol=1e-12)

    def test_rays_pass_through_point(self):
        p = np.array([0.3, -0.4, 0.2])
        rays, dt = sample_multiview_batch(p, 200, UNIT, np.random.default_rng(0))
        p_in, _, m = rays_to_points(rays[0], UNIT)
        np.testing.assert_allclose(p_in + dt[0, :, None] * m, np.broadcast_to(p, (200, 3)), atol=1e-12)

    def test_deterministic(self):
        p = np.array([0.1, 0.2, 0.3])
        assert sample_multiview_rays(p, 10, UNIT, 7) == sample_multiview_rays(p, 10, UNIT, 7)

    def test_outside(self):
        with pytest.raises(PointOutsideSphere):
            sample_multiview_rays(np.array([1.0, 0, 0]), 3, UNIT, 0)

    def test_mean_chord_monte_carlo(self):
        # independent oracle: backward distance from p to the sphere along
        # uniformly random directions, drawn with a different generator
        p = np.array([0.5, 0.0, 0.0])
        _, dt = sample_multiview_batch(p, 100_000, UNIT, np.random.default_rng(11))
        rng = np.random.Generator(np.random.MT19937(5))
        z = rng.uniform(-1, 1, 200_000)
        a = rng.uniform(0, 2 * np.pi, 200_000)
        w = np.stack([np.sqrt(1 - z**2) * np.cos(a), np.sqrt(1 - z**2) * np.sin(a), z], -1)
        b = w @ p
        ref = b + np.sqrt(b * b - (p @ p - 1.0))
        assert dt.mean() == pytest.approx(ref.mean(), rel=0.01)

    def test_octant_balance(self):
        M = 100_000
        rays, _ = sample_multiview_batch(np.zeros(3), M, UNIT, np.random.default_rng(2))
        _, _, m = rays_to_points(rays[0], UNIT)
        octant = (m > 0).astype(int) @ [1, 2, 4]
        counts = np.bincount(octant, minlength=8)
        assert np.all(np.abs(counts - M / 8) <= 4 * np.sqrt(M))


class TestTransformationResidual:
    def test_identity(self):
        ray, d0 = parameterize_ray([0.2, -3, 0.1], unit([0, 1, 0.05]), UNIT)
        p_in, _, m = ray_to_points(ray, UNIT)
        s = RaySample(ray, 0.7, p_in + 0.7 * m, d0)
        assert transformation_residual(s, s, UNIT) == 0.0

    def test_opposite_faces_of_cube(self):
        # unit cube [-0.5, 0.5]^3 seen from +x and -x along the x axis
        samples = []
        for sx in (1.0, -1.0):
            ray, d0 = parameterize_ray([2 * sx, 0.1, 0.2], [-sx, 0, 0], UNIT)
            p_in, _, m = ray_to_points(ray, UNIT)
            d = abs(p_in[0]) - 0.5
            samples.append(RaySample(ray, d, p_in + d * m, d0))
        assert transformation_residual(*samples, UNIT) >= 1.0 - 1e-9


class TestDeriveNormal:
    def test_sphere_field_equatorial_view(self):
        # a ball of radius 0.5 viewed head-on; the view axis is kept off the
        # coordinate poles (see test_pole_view)
        f = sphere_field([0, 0, 0], 0.5, UNIT)
        r, d0 = encode([2, 0, 0], [-1, 0, 0], UNIT)
        res = derive_normal(denormalize_rays(r), f(r), fd_gradient(f, r), UNIT, d0)
        np.testing.assert_allclose(res.n, [1, 0, 0], atol=1e-6)

    def test_pole_view(self):
        f = sphere_field([0, 0, 0], 0.5, UNIT)
        r, d0 = encode([0, 0, 2], [0, 0, -1], UNIT)
        with pytest.raises(PoleSingularity):
            derive_normal(denormalize_rays(r), f(r), fd_gradient(f, r), UNIT, d0)

    def test_constant_field(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            o = unit(rng.standard_normal(3)) * 2.5
            m = unit(rng.normal(0, 0.2, 3) - o)
            ray, d0 = parameterize_ray(o, m, UNIT)
            res = derive_normal(ray, 0.3, np.zeros(4), UNIT, d0, entry_term=False)
            assert angle_between(res.n, -m) < 1e-9

    def test_oblique_plane(self):
        f = plane_field([0, 0, 1], 0.0, UNIT)
        o = np.array([2.0, 0.3, 2.0])
        m = unit(np.array([0.0, 0.3, 0.0]) - o)  # 45 degrees to the plane
        r, d0 = encode(o, m, UNIT)
        res = derive_normal(denormalize_rays(r), f(r), fd_gradient(f, r), UNIT, d0)
        np.testing.assert_allclose(res.n, [0, 0, 1], atol=1e-4)
        assert res.stretch == pytest.approx(np.sqrt(2), rel=1e-4)

    def test_unit_length(self):
        rng = np.random.default_rng(5)
        rays, dh, gs, d0s, _ = analytic_batch(sphere_field([0.1, 0, 0], 0.4, UNIT),
                                               lambda g: g.normal(0, 0.2, 3), lambda p: unit(p - [0.1, 0, 0]),
                                               50, rng, UNIT)
        n, mag, _, status = derive_normals(rays, dh, gs, UNIT, d0s)
        assert (status == 0).all() and (mag > 0).all()
        np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-9)

    def test_sphere_field_1000_rays(self):
        rng = np.random.default_rng(6)
        batch = analytic_batch(sphere_field([0, 0, 0], 0.5, UNIT), lambda g: unit(g.standard_normal(3)) * 0.3,
                               unit, 1000, rng, UNIT)
        rays, dh, gs, d0s, ref = batch
        n, _, _, status = derive_normals(rays, dh, gs, UNIT, d0s)
        assert (status == 0).all()
        assert angle_between(n, ref).max() < 1e-4
