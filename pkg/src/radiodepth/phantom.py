"""Analytic bone-like phantoms and exact ground-truth rendering.

Scenes are unions of convex solid primitives (sphere, ellipsoid, capsule)
so that every pixel ray has closed-form front/back intersections.  That
turns the renderer into a machine-precision oracle for dual-face depth
maps, multi-label masks and a Beer-Lambert attenuation image, replacing
CT-derived ground truth with something testable to 1e-9 mm.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import DepthMap, DepthMapSet, ImagingGeometry, PointCloud, default_geometry, pixel_rays
from .validation import as_float_array, check_rotation_matrix

__all__ = [
    "Primitive",
    "PhantomScene",
    "LabelMask",
    "JitterParams",
    "ray_intersect",
    "render_ground_truth",
    "sample_scene",
    "sample_surface_points",
    "corresponded_surface_points",
    "scene_to_json",
    "scene_from_json",
]

_KINDS = ("sphere", "ellipsoid", "capsule")

# jitter magnitudes accepted by sample_scene
MAX_JITTER_TRANSLATION_MM = 20.0
MAX_JITTER_ROTATION_DEG = 15.0
MAX_JITTER_SCALE = 0.15


@dataclass
class Primitive:
    """One convex solid: local shape plus a rigid pose.

    radii by kind: sphere (r,), ellipsoid (rx, ry, rz), capsule
    (radius, half_length) with the capsule axis along local z.
    attenuation is a linear coefficient in 1/mm.
    """

    kind: str
    radii: tuple
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    attenuation: float = 0.01

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.radii = tuple(float(r) for r in self.radii)
        expected = {"sphere": 1, "ellipsoid": 3, "capsule": 2}[self.kind]
        if len(self.radii) != expected:
            raise ValueError(f"{self.kind} needs {expected} shape parameters, got {len(self.radii)}")
        if any(r <= 0 for r in self.radii):
            raise ValueError("shape parameters must be positive")
        self.rotation = check_rotation_matrix(self.rotation, "rotation")
        self.translation = as_float_array(self.translation, "translation", (3,))
        if self.attenuation < 0:
            raise ValueError("attenuation must be >= 0")

    # -- geometry in the local frame -------------------------------------

    def _to_local(self, points):
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def intervals(self, origin, directions):
        """Entry/exit ray parameters (t_lo, t_hi, hit) for this solid.

        origin is a single 3-vector; directions may be any (..., 3) grid of
        unit vectors.  A solid lying entirely behind the origin (exit
        parameter <= 0) counts as a miss; misses return hit=False with
        undefined t values.
        """
        d = np.asarray(directions, dtype=np.float64) @ self.rotation
        p = self._to_local(origin)
        if self.kind == "sphere":
            (r,) = self.radii
            lo, hi, hit = _quadratic_interval(_dot(d, d), 2.0 * _dot(p, d), float(np.dot(p, p)) - r * r)
        elif self.kind == "ellipsoid":
            radii = np.asarray(self.radii)
            q, e = p / radii, d / radii
            lo, hi, hit = _quadratic_interval(_dot(e, e), 2.0 * _dot(q, e), float(np.dot(q, q)) - 1.0)
        else:
            lo, hi, hit = _capsule_intervals(self.radii[0], self.radii[1], p, d)
        return lo, hi, hit & (hi > 0.0)

    def contains(self, points):
        """Strict interior test (surface points are not contained)."""
        p = self._to_local(points)
        if self.kind == "sphere":
            return _dot(p, p) < self.radii[0] ** 2
        if self.kind == "ellipsoid":
            q = p / np.asarray(self.radii)
            return _dot(q, q) < 1.0
        r, h = self.radii
        z = np.clip(p[..., 2], -h, h)
        axis_pt = np.zeros_like(p)
        axis_pt[..., 2] = z
        return _dot(p - axis_pt, p - axis_pt) < r * r

    def surface_weight(self):
        """Sampling weight: exact area (sphere, capsule) or an area upper
        bound (ellipsoid) compensated by per-candidate acceptance."""
        if self.kind == "sphere":
            return 4.0 * math.pi * self.radii[0] ** 2
        if self.kind == "ellipsoid":
            a, b, c = self.radii
            return 4.0 * math.pi * max(b * c, a * c, a * b)
        r, h = self.radii
        return 4.0 * math.pi * r * r + 4.0 * math.pi * r * h

    def draw_surface_params(self, rng, n):
        """n candidate surface parameters plus acceptance probabilities.

        A parameter row is (tag, a, b, c): tag 0 holds a unit direction
        (sphere/ellipsoid), tag 1 a cylinder-side point (cos phi, sin phi,
        z fraction), tag 2 a cap direction whose z sign picks the cap.
        Acceptance < 1 only for ellipsoids, where it corrects the
        unit-sphere parameterization to uniform surface density.
        """
        params = np.zeros((n, 4))
        if self.kind == "capsule":
            r, h = self.radii
            side_area = 4.0 * math.pi * r * h
            total = side_area + 4.0 * math.pi * r * r
            on_side = rng.random(n) < side_area / total
            phi = rng.uniform(0.0, 2.0 * math.pi, n)
            frac = rng.uniform(-1.0, 1.0, n)
            w = _random_unit_vectors(rng, n)
            params[:, 0] = np.where(on_side, 1.0, 2.0)
            params[:, 1] = np.where(on_side, np.cos(phi), w[:, 0])
            params[:, 2] = np.where(on_side, np.sin(phi), w[:, 1])
            params[:, 3] = np.where(on_side, frac, w[:, 2])
            return params, np.ones(n)
        u = _random_unit_vectors(rng, n)
        params[:, 1:] = u
        if self.kind == "sphere":
            return params, np.ones(n)
        a, b, c = self.radii
        g = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
        return params, g / max(b * c, a * c, a * b)

    def surface_points(self, params):
        """Evaluate (n, 4) surface parameters to (n, 3) world points."""
        params = np.atleast_2d(np.asarray(params, dtype=np.float64))
        local = np.empty((len(params), 3))
        tags = params[:, 0].astype(int)
        if self.kind == "capsule":
            r, h = self.radii
            body = tags == 1
            local[body, 0] = r * params[body, 1]
            local[body, 1] = r * params[body, 2]
            local[body, 2] = h * params[body, 3]
            cap = tags == 2
            w = params[cap, 1:]
            local[cap] = r * w
            local[cap, 2] += np.copysign(h, w[:, 2])
        else:
            radii = np.asarray(self.radii if self.kind == "ellipsoid" else self.radii * 3)
            local = params[:, 1:] * radii
        return local @ self.rotation.T + self.translation

    def to_dict(self):
        return {
            "kind": self.kind,
            "radii": list(self.radii),
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "attenuation": self.attenuation,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            radii=tuple(d["radii"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=d["translation"],
            attenuation=float(d["attenuation"]),
        )


def _dot(a, b):
    return np.sum(a * b, axis=-1) if getattr(a, "ndim", 0) > 1 or getattr(b, "ndim", 0) > 1 else float(np.dot(a, b))


def _quadratic_interval(a, b, c):
    """Solve a t^2 + b t + c <= 0 for the inside-interval of a convex quadric."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    disc = b * b - 4.0 * a * c
    hit = (disc >= 0.0) & (a > 0.0)
    sq = np.sqrt(np.where(hit, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        lo = (-b - sq) / (2.0 * a)
        hi = (-b + sq) / (2.0 * a)
    return lo, hi, hit


def _capsule_intervals(radius, half_length, p, d):
    """Capsule = cylinder body within |z| <= h plus two sphere caps;
    the pieces overlap, so the union interval is (min entry, max exit)."""
    p = np.broadcast_to(p, d.shape)
    px, py, pz = p[..., 0], p[..., 1], p[..., 2]
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]

    a = dx * dx + dy * dy
    b = 2.0 * (px * dx + py * dy)
    c = px * px + py * py - radius * radius
    q_lo, q_hi, q_hit = _quadratic_interval(a, b, c)
    axis_parallel = ~(a > 0.0)
    inside_inf_cyl = axis_parallel & (c <= 0.0)

    with np.errstate(divide="ignore", invalid="ignore"):
        s0 = (-half_length - pz) / dz
        s1 = (half_length - pz) / dz
    dz_ok = np.abs(dz) > 0.0
    z_inside = np.abs(pz) <= half_length
    slab_lo = np.where(dz_ok, np.minimum(s0, s1), np.where(z_inside, -np.inf, np.inf))
    slab_hi = np.where(dz_ok, np.maximum(s0, s1), np.where(z_inside, np.inf, -np.inf))

    body_lo = np.where(q_hit, np.maximum(q_lo, slab_lo), np.where(inside_inf_cyl, slab_lo, np.inf))
    body_hi = np.where(q_hit, np.minimum(q_hi, slab_hi), np.where(inside_inf_cyl, slab_hi, -np.inf))
    body_hit = body_lo <= body_hi

    lo = np.where(body_hit, body_lo, np.inf)
    hi = np.where(body_hit, body_hi, -np.inf)
    hit = body_hit.copy()
    for cz in (half_length, -half_length):
        pc = p.copy()
        pc[..., 2] -= cz
        c_lo, c_hi, c_hit = _quadratic_interval(
            _dot(d, d), 2.0 * np.sum(pc * d, axis=-1), np.sum(pc * pc, axis=-1) - radius * radius
        )
        lo = np.where(c_hit, np.minimum(lo, c_lo), lo)
        hi = np.where(c_hit, np.maximum(hi, c_hi), hi)
        hit |= c_hit
    return lo, hi, hit


def _random_unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class LabelMask:
    """Per-pixel sets of object ids, stored as one boolean plane per object.

    A pixel's label set is exactly the set of objects whose depth is valid
    there, so labels may overlay (e.g. in a joint region).
    """

    object_ids: list
    masks: np.ndarray

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3 or self.masks.shape[0] != len(self.object_ids):
            raise ValueError("masks must be (n_objects, height, width)")

    def mask(self, object_id):
        try:
            return self.masks[self.object_ids.index(object_id)]
        except ValueError:
            raise KeyError(f"unknown object_id {object_id!r}") from None

    def label_counts(self):
        return self.masks.sum(axis=0)


@dataclass
class PhantomScene:
    """Named unions of primitives in front of one imaging geometry.

    Primitives within one object must share a single attenuation value so
    the object's Beer-Lambert contribution is attenuation * (back - front).
    """

    objects: list
    geometry: ImagingGeometry

    def __post_init__(self):
        if not self.objects:
            raise ValueError("scene needs at least one object")
        ids = [oid for oid, _ in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        for oid, prims in self.objects:
            if not prims:
                raise ValueError(f"object {oid!r} has no primitives")
            atts = {p.attenuation for p in prims}
            if len(atts) != 1:
                raise ValueError(f"object {oid!r} mixes attenuation values {sorted(atts)}")

    @property
    def object_ids(self):
        return [oid for oid, _ in self.objects]

    def primitives(self, object_id):
        for oid, prims in self.objects:
            if oid == object_id:
                return prims
        raise KeyError(f"unknown object_id {object_id!r}")

    def attenuation_of(self, object_id):
        return self.primitives(object_id)[0].attenuation


def _union_intervals(primitives, origin, directions):
    lo = np.full(np.asarray(directions).shape[:-1], np.inf)
    hi = np.full_like(lo, -np.inf)
    hit = np.zeros(lo.shape, dtype=bool)
    for prim in primitives:
        p_lo, p_hi, p_hit = prim.intervals(origin, directions)
        lo = np.where(p_hit, np.minimum(lo, p_lo), lo)
        hi = np.where(p_hit, np.maximum(hi, p_hi), hi)
        hit |= p_hit
    return lo, hi, hit


def ray_intersect(primitives, origin, direction):
    """Front/back ray parameters over a union of primitives, or None.

    direction must be unit-norm; the returned pair is (smallest entry,
    largest exit) over all primitives the ray hits.
    """
    direction = as_float_array(direction, "direction", (3,))
    n = float(np.linalg.norm(direction))
    if abs(n - 1.0) > 1e-9:
        raise ValueError(f"direction must be unit-norm, |d| = {n!r}")
    origin = as_float_array(origin, "origin", (3,))
    lo, hi, hit = _union_intervals(primitives, origin, direction[None, :])
    if not bool(hit[0]):
        return None
    return float(lo[0]), float(hi[0])


def render_ground_truth(scene: PhantomScene, noise_sigma=0.0, rng=None):
    """Exact dual-face depth maps, label mask and attenuation image.

    Per object and pixel, the front (back) map holds the smallest
    (largest) ray parameter of the union; rays that miss are NaN.  The
    attenuation image is monochromatic Beer-Lambert,
    exp(-sum_objects attenuation * (back - front)), optionally with added
    Gaussian pixel noise when noise_sigma > 0.
    """
    geom = scene.geometry
    dirs = pixel_rays(geom)
    maps, planes, optical_depth = [], [], np.zeros((geom.height, geom.width))
    for oid, prims in scene.objects:
        lo, hi, hit = _union_intervals(prims, geom.source_position, dirs)
        maps.append(DepthMap(np.where(hit, lo, np.nan)))
        maps.append(DepthMap(np.where(hit, hi, np.nan)))
        planes.append(hit)
        optical_depth += scene.attenuation_of(oid) * np.where(hit, hi - lo, 0.0)
    image = np.exp(-optical_depth)
    if noise_sigma > 0.0:
        rng = np.random.default_rng(rng)
        image = image + rng.normal(0.0, noise_sigma, image.shape)
    dmset = DepthMapSet(maps=maps, object_ids=list(scene.object_ids), geometry=geom)
    labels = LabelMask(object_ids=list(scene.object_ids), masks=np.stack(planes))
    return dmset, labels, image


@dataclass(frozen=True)
class JitterParams:
    """Per-object rigid jitter plus per-axis shape-parameter jitter."""

    translation_mm: float = 6.0
    rotation_deg: float = 5.0
    scale: float = 0.06

    def __post_init__(self):
        if not 0.0 <= self.translation_mm <= MAX_JITTER_TRANSLATION_MM:
            raise ValueError(f"translation jitter must be in [0, {MAX_JITTER_TRANSLATION_MM}] mm")
        if not 0.0 <= self.rotation_deg <= MAX_JITTER_ROTATION_DEG:
            raise ValueError(f"rotation jitter must be in [0, {MAX_JITTER_ROTATION_DEG}] deg")
        if not 0.0 <= self.scale <= MAX_JITTER_SCALE:
            raise ValueError(f"scale jitter must be in [0, {MAX_JITTER_SCALE}]")


def rotation_about(axis, angle):
    """Rodrigues rotation matrix for a (not necessarily unit) axis."""
    axis = as_float_array(axis, "axis", (3,))
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


# Canonical hip-like template: two hemipelvis ellipsoid unions and two
# femur capsule+sphere unions around z = 800 mm, with the femoral heads
# overlapping the acetabular regions in projection.
_PELVIS_ATTENUATION = 0.009
_FEMUR_ATTENUATION = 0.011


def _canonical_hip_objects(deformed):
    head_radii = (23.0, 23.0, 23.0)
    if deformed:
        # disease stand-in: superiorly flattened femoral head
        head_radii = (23.0, 16.0, 23.0)
    objects = []
    for side, sx in (("r", -1.0), ("l", 1.0)):
        wing = Primitive(
            kind="ellipsoid",
            radii=(40.0, 48.0, 24.0),
            rotation=rotation_about((0.0, 0.0, 1.0), sx * 0.30),
            translation=(sx * 62.0, -35.0, 800.0),
            attenuation=_PELVIS_ATTENUATION,
        )
        acetab = Primitive(
            kind="ellipsoid",
            radii=(26.0, 24.0, 22.0),
            translation=(sx * 40.0, 12.0, 800.0),
            attenuation=_PELVIS_ATTENUATION,
        )
        objects.append((f"pelvis_{side}", [wing, acetab]))
    for side, sx in (("r", -1.0), ("l", 1.0)):
        head = Primitive(
            kind="ellipsoid",
            radii=head_radii,
            translation=(sx * 38.0, 26.0, 796.0),
            attenuation=_FEMUR_ATTENUATION,
        )
        shaft = Primitive(
            kind="capsule",
            radii=(13.0, 52.0),
            rotation=rotation_about((0.0, 0.0, 1.0), sx * 0.12) @ rotation_about((1.0, 0.0, 0.0), -math.pi / 2),
            translation=(sx * 45.0, 80.0, 798.0),
            attenuation=_FEMUR_ATTENUATION,
        )
        objects.append((f"femur_{side}", [head, shaft]))
    return objects


def _random_blob_objects(rng, n_objects=3):
    objects = []
    for i in range(n_objects):
        prims = []
        attenuation = rng.uniform(0.006, 0.014)
        center = np.array([rng.uniform(-70, 70), rng.uniform(-70, 70), rng.uniform(760, 840)])
        for _ in range(rng.integers(1, 3)):
            kind = _KINDS[rng.integers(0, 3)]
            offset = center + rng.uniform(-18, 18, 3)
            rot = rotation_about(rng.normal(size=3), rng.uniform(0, math.pi))
            if kind == "sphere":
                radii = (rng.uniform(15, 35),)
            elif kind == "ellipsoid":
                radii = tuple(rng.uniform(15, 35, 3))
            else:
                radii = (rng.uniform(8, 18), rng.uniform(20, 45))
            prims.append(Primitive(kind=kind, radii=radii, rotation=rot, translation=offset, attenuation=attenuation))
        objects.append((f"blob_{i}", prims))
    return objects


def sample_scene(rng_seed, template="hip-like", jitter=None, deformed=False, geometry=None):
    """Deterministic scene for a seed: canonical template plus jitter.

    Zero jitter reproduces the canonical template parameters exactly.
    The deformed flag flattens the femoral heads (hip-like template only),
    giving a harder subgroup for completion experiments.
    """
    if template not in ("hip-like", "random-blobs"):
        raise ValueError(f"unknown template {template!r}")
    jitter = jitter if jitter is not None else JitterParams()
    geometry = geometry if geometry is not None else default_geometry()
    rng = np.random.default_rng(rng_seed)
    if template == "hip-like":
        objects = _canonical_hip_objects(deformed)
    else:
        objects = _random_blob_objects(rng)

    sigma_rot = math.radians(jitter.rotation_deg)
    jittered = []
    for oid, prims in objects:
        shift = rng.normal(size=3)
        axis = rng.normal(size=3)
        angle = rng.normal()
        center = np.mean([p.translation for p in prims], axis=0)
        new_prims = []
        for prim in prims:
            radii = np.asarray(prim.radii)
            scale_draw = np.clip(rng.normal(size=len(radii)), -3.0, 3.0)
            rotation, translation = prim.rotation, prim.translation
            if jitter.scale > 0.0:
                radii = radii * (1.0 + jitter.scale * scale_draw)
            if sigma_rot > 0.0:
                r_j = rotation_about(axis, sigma_rot * float(np.clip(angle, -3.0, 3.0)))
                rotation = r_j @ rotation
                translation = center + r_j @ (translation - center)
            if jitter.translation_mm > 0.0:
                translation = translation + jitter.translation_mm * shift
            new_prims.append(
                Primitive(
                    kind=prim.kind,
                    radii=tuple(radii),
                    rotation=rotation,
                    translation=translation,
                    attenuation=prim.attenuation,
                )
            )
        jittered.append((oid, new_prims))
    return PhantomScene(objects=jittered, geometry=geometry)


def _draw_surface_params(primitives, count, rng):
    """(primitive index, surface parameter) rows uniform on the union surface.

    Primitives are selected proportionally to their surface weight, each
    candidate is corrected to uniform on its primitive, and candidates
    strictly inside any sibling primitive are rejected.  Returns an array
    of primitive indices and the matching (count, 4) parameter array.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    weights = np.array([p.surface_weight() for p in primitives])
    probs = weights / weights.sum()
    kept_idx, kept_params = [], []
    n_kept = 0
    while n_kept < count:
        n = max(2 * (count - n_kept), 128)
        picks = rng.choice(len(primitives), size=n, p=probs)
        for prim_i in range(len(primitives)):
            sel = picks == prim_i
            m = int(sel.sum())
            if m == 0:
                continue
            prim = primitives[prim_i]
            params, acc = prim.draw_surface_params(rng, m)
            keep = rng.random(m) < acc
            params = params[keep]
            if len(params) == 0:
                continue
            pts = prim.surface_points(params)
            occluded = np.zeros(len(pts), dtype=bool)
            for j, other in enumerate(primitives):
                if j != prim_i:
                    occluded |= other.contains(pts)
            params = params[~occluded]
            if len(params):
                kept_idx.append(np.full(len(params), prim_i))
                kept_params.append(params)
                n_kept += len(params)
    idx = np.concatenate(kept_idx)[:count]
    params = np.vstack(kept_params)[:count]
    return idx, params


def _eval_surface_params(primitives, idx, params):
    pts = np.empty((len(idx), 3))
    for prim_i in range(len(primitives)):
        sel = idx == prim_i
        if sel.any():
            pts[sel] = primitives[prim_i].surface_points(params[sel])
    return pts


def sample_surface_points(primitives, count, rng_seed) -> PointCloud:
    """count points uniformly distributed on the union surface."""
    rng = np.random.default_rng(rng_seed)
    idx, params = _draw_surface_params(primitives, count, rng)
    return PointCloud(_eval_surface_params(primitives, idx, params))


def corresponded_surface_points(scenes, object_id, count, rng_seed):
    """Point-to-point corresponded surface samples across scene instances.

    Surface parameters are drawn once on the first scene's object and
    re-evaluated on every instance, so row p of each returned shape is the
    same anatomical location.  Returns an (n_scenes, count, 3) array.
    """
    families = [scene.primitives(object_id) for scene in scenes]
    structure = [(p.kind, len(p.radii)) for p in families[0]]
    for fam in families[1:]:
        if [(p.kind, len(p.radii)) for p in fam] != structure:
            raise ValueError("scenes do not share a primitive structure for this object")
    rng = np.random.default_rng(rng_seed)
    idx, params = _draw_surface_params(families[0], count, rng)
    return np.stack([_eval_surface_params(fam, idx, params) for fam in families])


def scene_to_json(scene: PhantomScene) -> str:
    doc = {
        "geometry": scene.geometry.to_dict(),
        "objects": [
            {"object_id": oid, "primitives": [p.to_dict() for p in prims]}
            for oid, prims in scene.objects
        ],
    }
    return json.dumps(doc, sort_keys=True)


def scene_from_json(text: str) -> PhantomScene:
    doc = json.loads(text)
    return PhantomScene(
        objects=[
            (obj["object_id"], [Primitive.from_dict(p) for p in obj["primitives"]])
            for obj in doc["objects"]
        ],
        geometry=ImagingGeometry.from_dict(doc["geometry"]),
    )
