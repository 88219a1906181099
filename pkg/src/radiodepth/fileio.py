"""On-disk formats: DMAP images, PLY point clouds, model files.

DMAP layout: ASCII magic ``DMAP``, newline, a one-line JSON header
{version: 1, width, height, channels, geometry: {...}, object_ids: [...]},
newline, then channels * width * height little-endian 32-bit IEEE floats,
row-major within a channel, channel-major overall.  NaN marks an invalid
pixel.

Channel conventions: a depth-map set stores 2K channels (front, back per
object, K = len(object_ids)); a label mask stores K channels of 1.0/NaN;
plain images (e.g. a radiograph) store one channel with empty object_ids.

Point clouds are ASCII PLY with float x, y, z properties and an optional
uchar object_id property (ids indexed into a comment-declared table).

Model files are a one-line JSON header followed by a little-endian
float64 blob whose length the header determines.
"""

import json

import numpy as np

from .geometry import DepthMap, DepthMapSet, ImagingGeometry, PointCloud
from .phantom import LabelMask

__all__ = [
    "write_dmap",
    "read_dmap",
    "write_depth_set",
    "read_depth_set",
    "write_label_mask",
    "read_label_mask",
    "write_image",
    "read_image",
    "write_ply",
    "read_ply",
    "write_blob_file",
    "read_blob_file",
]

DMAP_MAGIC = b"DMAP"
DMAP_VERSION = 1


class FileFormatError(ValueError):
    """Raised when a file does not match its declared format."""


def write_dmap(path, channels, geometry: ImagingGeometry, object_ids=()):
    """Write a channel stack (C, H, W) float array as a DMAP file."""
    channels = np.asarray(channels, dtype=np.float64)
    if channels.ndim == 2:
        channels = channels[None]
    if channels.ndim != 3:
        raise ValueError("channel stack must be (C, H, W)")
    c, h, w = channels.shape
    if (h, w) != (geometry.height, geometry.width):
        raise ValueError("channel dimensions do not match the geometry")
    header = {
        "version": DMAP_VERSION,
        "width": w,
        "height": h,
        "channels": c,
        "geometry": geometry.to_dict(),
        "object_ids": list(object_ids),
    }
    with open(path, "wb") as f:
        f.write(DMAP_MAGIC + b"\n")
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(channels.astype("<f4").tobytes())


def read_dmap(path):
    """Read a DMAP file: (channels (C, H, W) float64, geometry, object_ids, header)."""
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n")
        if magic != DMAP_MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}")
        try:
            header = json.loads(f.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FileFormatError(f"{path}: unreadable header ({e})") from None
        for key in ("version", "width", "height", "channels", "geometry", "object_ids"):
            if key not in header:
                raise FileFormatError(f"{path}: header missing {key!r}")
        if header["version"] != DMAP_VERSION:
            raise FileFormatError(f"{path}: unsupported version {header['version']}")
        c, h, w = header["channels"], header["height"], header["width"]
        blob = f.read()
    expected = c * h * w * 4
    if len(blob) != expected:
        raise FileFormatError(f"{path}: blob is {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(c, h, w)
    try:
        geometry = ImagingGeometry.from_dict(header["geometry"])
    except (KeyError, ValueError) as e:
        raise FileFormatError(f"{path}: invalid geometry ({e})") from None
    if (geometry.height, geometry.width) != (h, w):
        raise FileFormatError(f"{path}: geometry dimensions disagree with header")
    return data, geometry, list(header["object_ids"]), header


def write_depth_set(path, dmset: DepthMapSet, geometry=None):
    geometry = geometry or dmset.geometry
    if geometry is None:
        raise ValueError("a geometry is required to write a depth set")
    stack = np.stack([m.values for m in dmset.maps])
    write_dmap(path, stack, geometry, dmset.object_ids)


def read_depth_set(path) -> DepthMapSet:
    data, geometry, object_ids, _ = read_dmap(path)
    if data.shape[0] != 2 * len(object_ids):
        raise FileFormatError(f"{path}: {data.shape[0]} channels for {len(object_ids)} objects")
    return DepthMapSet(
        maps=[DepthMap(plane) for plane in data],
        object_ids=object_ids,
        geometry=geometry,
    )


def write_label_mask(path, labels: LabelMask, geometry: ImagingGeometry):
    stack = np.where(labels.masks, 1.0, np.nan)
    write_dmap(path, stack, geometry, labels.object_ids)


def read_label_mask(path):
    data, geometry, object_ids, _ = read_dmap(path)
    if data.shape[0] != len(object_ids):
        raise FileFormatError(f"{path}: {data.shape[0]} channels for {len(object_ids)} labels")
    return LabelMask(object_ids=object_ids, masks=np.isfinite(data)), geometry


def write_image(path, image, geometry: ImagingGeometry):
    write_dmap(path, np.asarray(image)[None], geometry, [])


def read_image(path):
    data, geometry, _, _ = read_dmap(path)
    if data.shape[0] != 1:
        raise FileFormatError(f"{path}: expected a single channel")
    return data[0], geometry


# -- PLY ------------------------------------------------------------------


def write_ply(path, cloud: PointCloud):
    pts = cloud.points
    labelled = cloud.object_ids is not None
    lines = ["ply", "format ascii 1.0"]
    if labelled:
        table = sorted(set(str(x) for x in cloud.object_ids))
        lines.append("comment object_id_table " + json.dumps(table))
        codes = {name: i for i, name in enumerate(table)}
    lines += [
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if labelled:
        lines.append("property uchar object_id")
    lines.append("end_header")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
        for i, p in enumerate(pts):
            row = f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}"
            if labelled:
                row += f" {codes[str(cloud.object_ids[i])]}"
            f.write(row + "\n")


def read_ply(path) -> PointCloud:
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise FileFormatError(f"{path}: not a PLY file")
        if f.readline().strip() != "format ascii 1.0":
            raise FileFormatError(f"{path}: only ascii 1.0 PLY is supported")
        n_vertex, props, table = None, [], None
        for line in f:
            token = line.strip()
            if token == "end_header":
                break
            if token.startswith("comment object_id_table "):
                table = json.loads(token[len("comment object_id_table "):])
            elif token.startswith("element vertex "):
                n_vertex = int(token.split()[-1])
            elif token.startswith("element "):
                raise FileFormatError(f"{path}: unsupported element {token!r}")
            elif token.startswith("property "):
                props.append(token.split()[-1])
        else:
            raise FileFormatError(f"{path}: missing end_header")
        if n_vertex is None or props[:3] != ["x", "y", "z"]:
            raise FileFormatError(f"{path}: vertex element must lead with x y z")
        has_label = "object_id" in props
        pts = np.empty((n_vertex, 3))
        labels = np.empty(n_vertex, dtype=object) if has_label else None
        for i in range(n_vertex):
            parts = f.readline().split()
            if len(parts) != len(props):
                raise FileFormatError(f"{path}: malformed vertex row {i}")
            pts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
            if has_label:
                code = int(parts[props.index("object_id")])
                labels[i] = table[code] if table is not None else str(code)
    return PointCloud(pts, labels)


# -- JSON header + float64 blob --------------------------------------------


def write_blob_file(path, header: dict, arrays):
    """One-line JSON header, newline, concatenated float64 blobs."""
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for arr in arrays:
            f.write(np.asarray(arr, dtype=np.float64).astype("<f8").tobytes())


def read_blob_file(path):
    """(header dict, flat float64 array of the remaining blob)."""
    with open(path, "rb") as f:
        try:
            header = json.loads(f.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FileFormatError(f"{path}: unreadable header ({e})") from None
        blob = f.read()
    if len(blob) % 8:
        raise FileFormatError(f"{path}: blob length {len(blob)} is not a multiple of 8")
    return header, np.frombuffer(blob, dtype="<f8").copy()
