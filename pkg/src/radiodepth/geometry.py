"""Source/detector geometry and depth-map <-> point-cloud conversion.

A point X-ray source and a flat detector define one ray per detector
pixel.  Depth is the Euclidean distance from the source along the pixel
ray (not a z-coordinate), so a front-face depth and a back-face depth of
the same object are the two endpoints of the chord the ray cuts through
it, and thickness is simply ``back - front``.

Invalid pixels are stored as NaN throughout.
"""

from dataclasses import dataclass

import numpy as np

from .validation import as_float_array, as_points, check_positive, check_unit_vector

__all__ = [
    "ImagingGeometry",
    "DepthMap",
    "DepthMapSet",
    "PointCloud",
    "ProjectionReport",
    "default_geometry",
    "pixel_ray",
    "pixel_rays",
    "backproject",
    "backproject_set",
    "project_depth",
    "pixel_footprint_area",
]


@dataclass(frozen=True)
class ImagingGeometry:
    """Point source plus flat detector, all lengths in mm.

    ``detector_origin`` is the center of pixel (0, 0); pixel (u, v) sits at
    ``detector_origin + u * pixel_spacing_u * u_axis + v * pixel_spacing_v * v_axis``.
    """

    source_position: np.ndarray
    detector_origin: np.ndarray
    detector_u_axis: np.ndarray
    detector_v_axis: np.ndarray
    pixel_spacing_u: float
    pixel_spacing_v: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "source_position", as_float_array(self.source_position, "source_position", (3,)))
        object.__setattr__(self, "detector_origin", as_float_array(self.detector_origin, "detector_origin", (3,)))
        object.__setattr__(self, "detector_u_axis", as_float_array(self.detector_u_axis, "detector_u_axis", (3,)))
        object.__setattr__(self, "detector_v_axis", as_float_array(self.detector_v_axis, "detector_v_axis", (3,)))
        check_unit_vector(self.detector_u_axis, "detector_u_axis")
        check_unit_vector(self.detector_v_axis, "detector_v_axis")
        if abs(float(np.dot(self.detector_u_axis, self.detector_v_axis))) > 1e-9:
            raise ValueError("detector_u_axis and detector_v_axis must be orthogonal")
        check_positive(self.pixel_spacing_u, "pixel_spacing_u")
        check_positive(self.pixel_spacing_v, "pixel_spacing_v")
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be >= 1")
        # source on the detector plane would make every ray degenerate
        if abs(float(np.dot(self.source_position - self.detector_origin, self.detector_normal))) < 1e-9:
            raise ValueError("source must not lie on the detector plane")

    @property
    def detector_normal(self):
        return np.cross(self.detector_u_axis, self.detector_v_axis)

    def detector_point(self, u, v):
        """World position of (possibly fractional) pixel coordinates."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return (
            self.detector_origin
            + np.multiply.outer(u * self.pixel_spacing_u, self.detector_u_axis)
            + np.multiply.outer(v * self.pixel_spacing_v, self.detector_v_axis)
        )

    def detector_distance(self, u, v):
        """Source-to-detector distance along the (u, v) pixel ray."""
        d = self.detector_point(u, v) - self.source_position
        return np.linalg.norm(d, axis=-1)

    def to_dict(self):
        return {
            "source_position": self.source_position.tolist(),
            "detector_origin": self.detector_origin.tolist(),
            "detector_u_axis": self.detector_u_axis.tolist(),
            "detector_v_axis": self.detector_v_axis.tolist(),
            "pixel_spacing_u": self.pixel_spacing_u,
            "pixel_spacing_v": self.pixel_spacing_v,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            source_position=d["source_position"],
            detector_origin=d["detector_origin"],
            detector_u_axis=d["detector_u_axis"],
            detector_v_axis=d["detector_v_axis"],
            pixel_spacing_u=float(d["pixel_spacing_u"]),
            pixel_spacing_v=float(d["pixel_spacing_v"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def default_geometry(size=256, pixel_spacing=1.6, sdd=1000.0):
    """Demo geometry: source at the origin, detector plane at z = sdd,
    principal point at the detector center."""
    half_u = (size - 1) / 2.0 * pixel_spacing
    half_v = (size - 1) / 2.0 * pixel_spacing
    return ImagingGeometry(
        source_position=(0.0, 0.0, 0.0),
        detector_origin=(-half_u, -half_v, sdd),
        detector_u_axis=(1.0, 0.0, 0.0),
        detector_v_axis=(0.0, 1.0, 0.0),
        pixel_spacing_u=pixel_spacing,
        pixel_spacing_v=pixel_spacing,
        width=size,
        height=size,
    )


@dataclass
class DepthMap:
    """Per-pixel distance from the source along the pixel ray, in mm.

    ``values`` is (height, width), row v / column u, NaN marking invalid
    pixels.  Every valid depth must be > 0 for ground-truth data.
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"depth values must be 2-D, got shape {self.values.shape}")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def validity(self):
        return np.isfinite(self.values)

    @property
    def valid_count(self):
        return int(self.validity.sum())

    def matches(self, geom: ImagingGeometry) -> bool:
        return self.width == geom.width and self.height == geom.height


@dataclass
class DepthMapSet:
    """Front/back depth-map pairs for K objects, sharing one geometry.

    ``maps`` holds 2K maps ordered front, back per object; ``object_ids``
    holds the K labels in the same object order.
    """

    maps: list
    object_ids: list
    geometry: ImagingGeometry = None

    def __post_init__(self):
        if len(self.maps) != 2 * len(self.object_ids):
            raise ValueError(
                f"expected 2 maps per object: {len(self.maps)} maps for {len(self.object_ids)} ids"
            )
        if len(set(self.object_ids)) != len(self.object_ids):
            raise ValueError("object_ids must be unique")
        shapes = {m.values.shape for m in self.maps}
        if len(shapes) > 1:
            raise ValueError(f"all maps must share one shape, got {shapes}")
        if self.geometry is not None and self.maps and not self.maps[0].matches(self.geometry):
            raise ValueError("map dimensions do not match the geometry")

    @property
    def n_objects(self):
        return len(self.object_ids)

    def index_of(self, object_id):
        try:
            return self.object_ids.index(object_id)
        except ValueError:
            raise KeyError(f"unknown object_id {object_id!r}") from None

    def front(self, object_id) -> DepthMap:
        return self.maps[2 * self.index_of(object_id)]

    def back(self, object_id) -> DepthMap:
        return self.maps[2 * self.index_of(object_id) + 1]

    def face_order_violations(self):
        """Pixels where both faces are valid but back < front, per object."""
        out = {}
        for oid in self.object_ids:
            f, b = self.front(oid).values, self.back(oid).values
            both = np.isfinite(f) & np.isfinite(b)
            out[oid] = int(np.count_nonzero(both & (b < f)))
        return out

    def thickness(self, object_id):
        """back - front where both faces are valid, NaN elsewhere."""
        f, b = self.front(object_id).values, self.back(object_id).values
        t = b - f
        t[~(np.isfinite(f) & np.isfinite(b))] = np.nan
        return t


@dataclass
class PointCloud:
    """Unordered 3D points in mm (world frame), optionally labelled."""

    points: np.ndarray
    object_ids: np.ndarray = None

    def __post_init__(self):
        self.points = as_points(self.points)
        if self.object_ids is not None:
            self.object_ids = np.asarray(self.object_ids)
            if self.object_ids.shape != (len(self.points),):
                raise ValueError("object_ids must have one entry per point")

    def __len__(self):
        return len(self.points)

    def select(self, object_id) -> "PointCloud":
        if self.object_ids is None:
            raise ValueError("cloud carries no per-point object ids")
        keep = self.object_ids == object_id
        return PointCloud(self.points[keep])


@dataclass
class ProjectionReport:
    """Bookkeeping for project_depth: points that produced no pixel."""

    n_behind_source: int = 0
    n_outside_detector: int = 0
    collisions_resolved_nearest: int = 0


def _check_pixel_in_range(geom, u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < 0) or np.any(u >= geom.width) or np.any(v < 0) or np.any(v >= geom.height):
        raise ValueError(
            f"pixel coordinates out of range for {geom.width}x{geom.height} detector"
        )
    return u, v


def pixel_ray(geom: ImagingGeometry, u, v):
    """Ray through pixel (u, v): returns (origin, unit direction).

    Fractional pixel coordinates are allowed; coordinates outside
    [0, width) x [0, height) raise ValueError.
    """
    u, v = _check_pixel_in_range(geom, u, v)
    target = geom.detector_point(u, v)
    d = target - geom.source_position
    d = d / np.linalg.norm(d, axis=-1, keepdims=d.ndim > 0)
    return geom.source_position.copy(), d


def pixel_rays(geom: ImagingGeometry):
    """Unit directions for all pixel centers, shaped (height, width, 3)."""
    v, u = np.meshgrid(
        np.arange(geom.height, dtype=np.float64),
        np.arange(geom.width, dtype=np.float64),
        indexing="ij",
    )
    d = geom.detector_point(u, v) - geom.source_position
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def backproject(geom: ImagingGeometry, depth: DepthMap) -> PointCloud:
    """One 3D point per valid pixel: source + depth * ray direction."""
    if not depth.matches(geom):
        raise ValueError("depth map dimensions do not match the geometry")
    valid = depth.validity
    dirs = pixel_rays(geom)[valid]
    pts = geom.source_position + depth.values[valid][:, None] * dirs
    return PointCloud(pts.reshape(-1, 3))


def backproject_set(geom: ImagingGeometry, dmset: DepthMapSet, faces="dual") -> PointCloud:
    """Back-project every object of a depth-map set into one labelled cloud.

    faces: "dual" uses front and back maps, "front" drops the back-face
    channels before reconstruction.
    """
    if faces not in ("dual", "front"):
        raise ValueError(f"faces must be 'dual' or 'front', got {faces!r}")
    chunks, labels = [], []
    for oid in dmset.object_ids:
        maps = [dmset.front(oid)] if faces == "front" else [dmset.front(oid), dmset.back(oid)]
        for m in maps:
            cloud = backproject(geom, m)
            if len(cloud):
                chunks.append(cloud.points)
                labels.extend([oid] * len(cloud))
    if not chunks:
        return PointCloud(np.zeros((0, 3)), np.array([], dtype=object))
    return PointCloud(np.vstack(chunks), np.array(labels, dtype=object))


def project_depth(geom: ImagingGeometry, cloud: PointCloud):
    """Nearest-surface depth map from a point cloud.

    Each point is projected along the source ray onto the detector and
    binned to the nearest pixel; when several points share a pixel the
    smallest depth wins.  Points behind the source (relative to the
    detector) and points projecting outside the detector are skipped and
    counted in the returned report.
    """
    values = np.full((geom.height, geom.width), np.nan)
    report = ProjectionReport()
    pts = cloud.points
    if len(pts) == 0:
        return DepthMap(values), report

    normal = geom.detector_normal
    # orient the normal from the source toward the detector
    if float(np.dot(geom.detector_origin - geom.source_position, normal)) < 0:
        normal = -normal
    rel = pts - geom.source_position
    along = rel @ normal
    behind = along <= 0
    report.n_behind_source = int(np.count_nonzero(behind))

    keep = ~behind
    rel = rel[keep]
    along = along[keep]
    plane_offset = float(np.dot(geom.detector_origin - geom.source_position, normal))
    t = plane_offset / along
    hit = geom.source_position + rel * t[:, None]
    u = (hit - geom.detector_origin) @ geom.detector_u_axis / geom.pixel_spacing_u
    v = (hit - geom.detector_origin) @ geom.detector_v_axis / geom.pixel_spacing_v
    ui = np.rint(u).astype(int)
    vi = np.rint(v).astype(int)
    inside = (ui >= 0) & (ui < geom.width) & (vi >= 0) & (vi < geom.height)
    report.n_outside_detector = int(np.count_nonzero(~inside))

    depths = np.linalg.norm(rel[inside], axis=1)
    ui, vi = ui[inside], vi[inside]
    order = np.argsort(depths)[::-1]  # write nearest last so it wins
    flat = vi[order] * geom.width + ui[order]
    report.collisions_resolved_nearest = int(len(flat) - len(np.unique(flat)))
    values.reshape(-1)[flat] = depths[order]
    return DepthMap(values), report


def pixel_footprint_area(geom: ImagingGeometry, u, v, depth):
    """Cross-section area (mm^2) of the pixel ray tube at a given depth.

    The pixel's physical area on the detector scales with the inverse
    square of distance along the ray: area = su * sv * (depth / D)^2 with
    D the source-to-detector distance of that pixel.
    """
    u, v = _check_pixel_in_range(geom, u, v)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be > 0")
    scale = depth / geom.detector_distance(u, v)
    return geom.pixel_spacing_u * geom.pixel_spacing_v * scale**2
