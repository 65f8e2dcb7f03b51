import numpy as np
import pytest
from hypothesis import settings

from voxgrasp.geometry import Pose, UnitQuaternion
from voxgrasp.scenegen import SdfScene, make_object, render_views
from voxgrasp.volume import GridConfig, Intrinsics, orbit_cameras, tsdf_fuse

settings.register_profile("desk", max_examples=60, deadline=None)
settings.load_profile("desk")

CENTER = (0.2, 0.2, 0.2)


def sphere_scene(radius, center=CENTER, table=None):
    """A lone sphere of ``radius`` meters (gripper max width 0.08)."""
    obj = make_object("sphere", radius / 0.04, Pose(UnitQuaternion.identity(), center))
    return SdfScene((obj,), table_height=table)


def box_scene(scale=1.0, center=CENTER, table=None):
    """Axis-aligned box with half extents (0.04, 0.028, 0.024) * scale."""
    obj = make_object("box", scale, Pose(UnitQuaternion.identity(), center))
    return SdfScene((obj,), table_height=table)


def fuse(scene, n=40, views=6, image=96):
    cams = orbit_cameras(0.4, views, intrinsics=Intrinsics.from_fov(image, image, 80.0))
    imgs = render_views(scene, cams)
    return tsdf_fuse(imgs, GridConfig(n, 0.4)), imgs


@pytest.fixture(scope="session")
def fused_sphere():
    return fuse(sphere_scene(0.05), image=160)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
