from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from spectralium.scene import Camera, Lambertian, Mesh, Scene, parse_scene
from spectralium.spectral import Spectrum
from spectralium.sunlight import SunLight

SCENES_DIR = Path(__file__).resolve().parent.parent / "scenes"


@pytest.fixture(scope="session")
def cornell_scene() -> Scene:
    return parse_scene(SCENES_DIR / "cornell.scn")


@pytest.fixture(scope="session")
def nave_scene() -> Scene:
    return parse_scene(SCENES_DIR / "nave.scn")


def quad_mesh(v0, v1, v2, v3, material_id: int, uvs: bool = False) -> Mesh:
    vertices = np.array([v0, v1, v2, v3], dtype=np.float64)
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    tris = [
        ((0, 1, 2), None, (0, 1, 2) if uvs else None),
        ((0, 2, 3), None, (0, 2, 3) if uvs else None),
    ]
    return Mesh(vertices, np.zeros((0, 3)), uv if uvs else np.zeros((0, 2)), tris, material_id)


def tri_mesh(v0, v1, v2, material_id: int) -> Mesh:
    vertices = np.array([v0, v1, v2], dtype=np.float64)
    return Mesh(vertices, np.zeros((0, 3)), np.zeros((0, 2)), [((0, 1, 2), None, None)], material_id)


def default_camera(width: int = 8, height: int = 8) -> Camera:
    return Camera(
        position=np.array([0.0, -3.0, 1.0]),
        look_at=np.array([0.0, 0.0, 1.0]),
        up=np.array([0.0, 0.0, 1.0]),
        vertical_fov=60.0,
        width=width,
        height=height,
    )


def constant_sun(direction, value: float = 1.0) -> SunLight:
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return SunLight(direction=d, emission=Spectrum.constant(value))


def make_scene(meshes, materials, lights, camera=None) -> Scene:
    return Scene(
        path=None,
        camera=camera or default_camera(),
        lights=list(lights),
        light_specs=[],
        materials=list(materials),
        material_names=[f"m{i}" for i in range(len(materials))],
        meshes=list(meshes),
        textures={},
        material_sources=[("lambertian", "const", "0") for _ in materials],
    )


def gray_lambertian(value: float = 0.6) -> Lambertian:
    return Lambertian(Spectrum.constant(value))
