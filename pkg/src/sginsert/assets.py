"""Run manifests and asset loading shared by the CLI and the session server.

A manifest is a single JSON document describing one run: scene, object,
transform, material, environment/SSDF/f_h files, camera, seeds and budgets.
Scene and object specs accept either file paths or procedural shorthands
("box_room@64", "sphere@3", "blob@3").
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .camera import Camera
from .fh import FhTable, build_fh
from .field import gen_procedural, load_field, SCENE_IDS
from .insert import InsertConfig, InsertionSession, VirtualObject
from .mesh import blob, icosphere, load_obj
from .sg import BRDFParams, SGMixture
from .sgfit import FitBudget
from .shadowfield import SSDFField


def quat_to_matrix(q):
    """Unit quaternion (w, x, y, z) -> rotation matrix."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("zero quaternion")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def load_scene(spec):
    if "@" in spec:
        name, res = spec.split("@", 1)
        if name not in SCENE_IDS:
            raise ValueError(f"unknown procedural scene {name!r}")
        return gen_procedural(name, int(res))
    return load_field(spec)


def load_mesh(spec):
    if "@" in spec:
        name, sub = spec.split("@", 1)
        if name == "sphere":
            return icosphere(int(sub))
        if name == "blob":
            return blob(int(sub))
        raise ValueError(f"unknown procedural mesh {name!r}")
    return load_obj(spec)


@dataclass
class RunManifest:
    scene: str = "floor_plane@64"
    object: str | None = None
    transform: dict = dc_field(default_factory=lambda: {
        "position": [0.0, 0.0, 0.0], "rotation": [1.0, 0.0, 0.0, 0.0], "scale": 1.0,
    })
    material: dict = dc_field(default_factory=lambda: {
        "roughness": 0.6, "metallic": 0.0, "albedo": [0.7, 0.7, 0.7],
    })
    env: str | None = None
    ssdf: str | None = None
    fh: str | None = None
    camera: dict | None = None
    seed: int = 0
    spp: int = 256
    res: tuple = (640, 360)
    frames: int = 1
    incident_res: int = 64
    rays_per_texel: int = 8
    lobe_count: int = 32
    cold_iters: int = 60
    warm_iters: int = 5

    def to_json(self):
        d = dict(self.__dict__)
        d["res"] = list(self.res)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        m = cls()
        for k, v in data.items():
            if not hasattr(m, k):
                raise ValueError(f"unknown manifest key {k!r}")
            setattr(m, k, tuple(v) if k == "res" else v)
        return m

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(f.read())


def default_camera_for(field, res):
    ext = float(np.max(field.extent))
    pos = field.center + np.array([0.0, -0.95, 0.55]) * ext
    return Camera(pos, field.center, width=res[0], height=res[1])


def build_session(manifest, fh_table=None):
    """Assemble an InsertionSession from a manifest (assets loaded fresh)."""
    field = load_scene(manifest.scene)
    obj = None
    if manifest.object:
        mesh = load_mesh(manifest.object)
        tr = manifest.transform
        obj = VirtualObject(
            mesh,
            BRDFParams(
                roughness=float(manifest.material.get("roughness", 0.6)),
                metallic=float(manifest.material.get("metallic", 0.0)),
                albedo=np.array(manifest.material.get("albedo", [0.7, 0.7, 0.7])),
            ),
            rotation=quat_to_matrix(tr.get("rotation", [1, 0, 0, 0])),
            translation=np.array(tr.get("position", [0, 0, 0]), dtype=np.float64),
            scale=float(tr.get("scale", 1.0)),
        )
    env = SGMixture.load(manifest.env) if manifest.env else SGMixture([])
    ssdf = SSDFField.load(manifest.ssdf) if manifest.ssdf else None
    if fh_table is None and manifest.fh:
        fh_table = FhTable.load(manifest.fh)
    camera = (
        Camera.from_dict(manifest.camera)
        if manifest.camera
        else default_camera_for(field, manifest.res)
    )
    camera.width, camera.height = int(manifest.res[0]), int(manifest.res[1])
    config = InsertConfig(
        incident_res=manifest.incident_res,
        rays_per_texel=manifest.rays_per_texel,
        lobe_count=manifest.lobe_count,
        cold_budget=FitBudget(max_iters=manifest.cold_iters),
        warm_budget=FitBudget(max_iters=manifest.warm_iters),
    )
    return InsertionSession(field, obj, env, ssdf, fh_table, camera,
                            seed=manifest.seed, config=config)
