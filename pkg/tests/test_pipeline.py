"""Cross-module properties: fused geometry accuracy on the analytic sphere."""

import numpy as np

from voxelstream.dataset import SphereScene, default_intrinsics, synthetic_frames
from voxelstream.mc_encoding import MeshConfig, recompute_mc_block, triangulate_block
from voxelstream.voxel_model import FusionConfig, VoxelModel


def fuse_sphere(voxel=0.01, frames=14, res=(96, 72)):
    scene = SphereScene(radius=0.5, orbit_radius=1.6)
    intr = default_intrinsics(*res)
    model = VoxelModel(FusionConfig(voxel_size=voxel, truncation=0.06),
                       bucket_count=1 << 14, excess_capacity=1 << 14)
    for frame in synthetic_frames(scene, intr, frames):
        model.allocate_blocks(frame.depth, frame.pose, intr)
        model.integrate_frame(frame.depth, frame.color, frame.pose, intr)
    return scene, model


class TestSphereReconstruction:
    def test_zero_crossings_near_analytic_surface(self):
        scene, model = fuse_sphere()
        cfg = MeshConfig(voxel_size=model.cfg.voxel_size)
        errors = []
        for key in model.keys():
            mc = recompute_mc_block(key, model.get_block)
            mesh = triangulate_block(mc, cfg)
            if mesh.triangle_count():
                radius = np.linalg.norm(mesh.positions.astype(np.float64), axis=1)
                errors.append(np.abs(radius - scene.radius))
        errors = np.concatenate(errors)
        assert len(errors) > 1000
        within = (errors <= model.cfg.voxel_size).mean()
        assert within >= 0.99

    def test_surface_color_is_fused(self):
        scene, model = fuse_sphere(frames=8)
        cfg = MeshConfig(voxel_size=model.cfg.voxel_size)
        colored = 0
        for key in model.keys():
            mc = recompute_mc_block(key, model.get_block)
            mesh = triangulate_block(mc, cfg)
            if mesh.triangle_count():
                colored += int((mesh.colors == scene.color).all(axis=1).sum())
        assert colored > 0
