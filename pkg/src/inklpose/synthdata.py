"""Procedural category-level instances with exact pose labels.

Each category is a union of analytic surface primitives in a canonical frame
whose up-axis is +y.  A sample holds a single-view partial cloud of exactly
1024 points in the camera frame, the ground-truth :class:`SimTransform`, and
per-point canonical (NOCS) coordinates.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from inklpose.errors import ArgumentError, ChecksumError, FormatError
from inklpose.geometry import PointCloud, SimTransform, random_rotation, uniform_rotation

N_POINTS = 1024
DENSE_POINTS = 4096
CATEGORY_NAMES = ("bottle", "bowl", "can", "mug", "laptop", "camera")


@dataclass(frozen=True)
class CategorySpec:
    name: str
    symmetric: bool
    shape_params: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def code(self) -> int:
        return CATEGORY_NAMES.index(self.name)


CATEGORIES = {
    "bottle": CategorySpec("bottle", True, {"radius": (0.25, 0.4), "body_h": (0.9, 1.3),
                                            "neck_ratio": (0.3, 0.5), "neck_h": (0.3, 0.6)}),
    "bowl": CategorySpec("bowl", True, {"depth_ratio": (0.55, 0.9), "wall": (0.05, 0.1)}),
    "can": CategorySpec("can", True, {"radius": (0.3, 0.5), "height": (0.8, 1.4)}),
    "mug": CategorySpec("mug", True, {"radius": (0.3, 0.4), "height": (0.7, 1.0),
                                      "handle_r": (0.18, 0.26), "handle_t": (0.04, 0.06)}),
    "laptop": CategorySpec("laptop", False, {"width": (1.0, 1.4), "depth": (0.7, 1.0),
                                             "thick": (0.03, 0.06), "open_deg": (60.0, 120.0)}),
    "camera": CategorySpec("camera", False, {"width": (0.9, 1.3), "height": (0.6, 0.8), "depth": (0.35, 0.5),
                                             "lens_r": (0.18, 0.26), "lens_len": (0.25, 0.45)}),
}

# per-part color codes stand in for semantic image features
PART_COLORS = {
    ("bottle", "body"): (0.1, 0.6, 0.2), ("bottle", "neck"): (0.2, 0.8, 0.8), ("bottle", "cap"): (0.9, 0.9, 0.1),
    ("bowl", "outer"): (0.8, 0.4, 0.2), ("bowl", "inner"): (0.9, 0.7, 0.5), ("bowl", "rim"): (0.5, 0.2, 0.1),
    ("can", "side"): (0.8, 0.1, 0.1), ("can", "lid"): (0.7, 0.7, 0.7),
    ("mug", "body"): (0.2, 0.3, 0.9), ("mug", "bottom"): (0.3, 0.3, 0.5), ("mug", "handle"): (0.9, 0.2, 0.7),
    ("laptop", "base"): (0.3, 0.3, 0.3), ("laptop", "screen"): (0.1, 0.1, 0.6),
    ("camera", "body"): (0.15, 0.15, 0.15), ("camera", "lens"): (0.6, 0.6, 0.9),
}


def category(name: str) -> CategorySpec:
    try:
        return CATEGORIES[name]
    except KeyError:
        raise ArgumentError(f"unknown category {name!r}; expected one of {', '.join(CATEGORY_NAMES)}") from None


# -- surface primitives -------------------------------------------------------
# Each primitive exposes area() and sample(n, rng) -> (points, outward normals).

@dataclass
class Frustum:
    """Lateral surface of a cone frustum around y (a cylinder when r0 == r1)."""
    r0: float
    r1: float
    y0: float
    y1: float
    inward: bool = False

    def area(self) -> float:
        slant = np.hypot(self.r1 - self.r0, self.y1 - self.y0)
        return float(np.pi * (self.r0 + self.r1) * slant)

    def sample(self, n, rng):
        # radius varies linearly with height, so the area density in the
        # height parameter is proportional to r(v); invert that CDF
        u = rng.uniform(size=n)
        if abs(self.r1 - self.r0) < 1e-12:
            v = u
        else:
            a, b = self.r0, self.r1
            v = (-a + np.sqrt(a * a + u * (b * b - a * a))) / (b - a)
        r = self.r0 + v * (self.r1 - self.r0)
        y = self.y0 + v * (self.y1 - self.y0)
        th = rng.uniform(0, 2 * np.pi, size=n)
        pts = np.stack([r * np.cos(th), y, r * np.sin(th)], axis=1)
        slope = (self.r0 - self.r1) / (self.y1 - self.y0)
        nrm = np.stack([np.cos(th), np.full(n, slope), np.sin(th)], axis=1)
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return pts, (-nrm if self.inward else nrm)


@dataclass
class Disk:
    """Annulus r_in..r_out in the plane y = const, normal +-y."""
    r_out: float
    y: float
    up: bool
    r_in: float = 0.0

    def area(self) -> float:
        return float(np.pi * (self.r_out ** 2 - self.r_in ** 2))

    def sample(self, n, rng):
        r = np.sqrt(rng.uniform(self.r_in ** 2, self.r_out ** 2, size=n))
        th = rng.uniform(0, 2 * np.pi, size=n)
        pts = np.stack([r * np.cos(th), np.full(n, self.y), r * np.sin(th)], axis=1)
        nrm = np.zeros((n, 3))
        nrm[:, 1] = 1.0 if self.up else -1.0
        return pts, nrm


@dataclass
class SphereZone:
    """Band of a sphere centred at (0, cy, 0) between heights y0 < y1."""
    radius: float
    cy: float
    y0: float
    y1: float
    inward: bool = False

    def area(self) -> float:
        # Archimedes: a zone's area is 2 pi R h
        return float(2 * np.pi * self.radius * (self.y1 - self.y0))

    def sample(self, n, rng):
        y = rng.uniform(self.y0, self.y1, size=n)
        rr = np.sqrt(np.maximum(self.radius ** 2 - (y - self.cy) ** 2, 0.0))
        th = rng.uniform(0, 2 * np.pi, size=n)
        pts = np.stack([rr * np.cos(th), y, rr * np.sin(th)], axis=1)
        nrm = (pts - np.array([0.0, self.cy, 0.0])) / self.radius
        return pts, (-nrm if self.inward else nrm)


@dataclass
class TorusArc:
    """Part of a torus in the xy plane: centre c, major radius a, tube radius b, angle span."""
    center: tuple
    a: float
    b: float
    u0: float
    u1: float

    def area(self) -> float:
        return float((self.u1 - self.u0) * 2 * np.pi * self.a * self.b)

    def sample(self, n, rng):
        out_u, out_v = [], []
        need = n
        while need > 0:
            u = rng.uniform(self.u0, self.u1, size=2 * need + 8)
            v = rng.uniform(0, 2 * np.pi, size=2 * need + 8)
            keep = rng.uniform(size=u.size) * (self.a + self.b) <= self.a + self.b * np.cos(v)
            out_u.append(u[keep][:need])
            out_v.append(v[keep][:need])
            need -= len(out_u[-1])
        u, v = np.concatenate(out_u), np.concatenate(out_v)
        ring = np.stack([np.cos(u), np.sin(u), np.zeros_like(u)], axis=1)
        nrm = np.cos(v)[:, None] * ring + np.sin(v)[:, None] * np.array([0.0, 0.0, 1.0])
        pts = np.asarray(self.center) + self.a * ring + self.b * nrm
        return pts, nrm


@dataclass
class Rect:
    """Planar rectangle: origin o, edge vectors e1, e2, normal along e1 x e2."""
    o: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.e1, self.e2)))

    def sample(self, n, rng):
        uv = rng.uniform(size=(n, 2))
        pts = self.o + uv[:, :1] * self.e1 + uv[:, 1:] * self.e2
        nrm = np.cross(self.e1, self.e2)
        nrm = nrm / np.linalg.norm(nrm)
        return pts, np.tile(nrm, (n, 1))


def box_faces(center, axes, half) -> list[Rect]:
    """Six outward-facing rectangles of an oriented box (axes are columns)."""
    c = np.asarray(center, dtype=np.float64)
    faces = []
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        ei, ej = 2 * half[i] * axes[:, i], 2 * half[j] * axes[:, j]
        for sgn in (1.0, -1.0):
            fc = c + sgn * half[k] * axes[:, k]
            o = fc - ei / 2 - ej / 2
            # (ei, ej) is right-handed along +axis k; swap for the opposite face
            faces.append(Rect(o, ei, ej) if sgn > 0 else Rect(o, ej, ei))
    return faces


def _draw(rng, rng_range):
    return float(rng.uniform(*rng_range))


def build_parts(cat: CategorySpec, rng) -> list[tuple[str, object]]:
    """Sample shape parameters and return (part name, primitive) pairs."""
    p = {k: _draw(rng, v) for k, v in cat.shape_params.items()}
    name = cat.name
    if name == "bottle":
        r, hb = p["radius"], p["body_h"]
        rn, hn = r * p["neck_ratio"], p["neck_h"]
        shoulder = 0.25 * hn
        return [
            ("body", Frustum(r, r, 0.0, hb)),
            ("body", Disk(r, 0.0, up=False)),
            ("neck", Frustum(r, rn, hb, hb + shoulder)),
            ("neck", Frustum(rn, rn, hb + shoulder, hb + hn)),
            ("cap", Disk(rn, hb + hn, up=True)),
        ]
    if name == "bowl":
        R = 0.5
        depth = R * p["depth_ratio"]
        w = p["wall"]
        return [
            ("outer", SphereZone(R, 0.0, -R, -R + depth)),
            ("inner", SphereZone(R - w, 0.0, -(R - w), -R + depth, inward=True)),
            ("rim", Disk(np.sqrt(R ** 2 - (R - depth) ** 2), -R + depth, up=True,
                         r_in=np.sqrt(max((R - w) ** 2 - (R - depth) ** 2, 0.0)))),
        ]
    if name == "can":
        r, h = p["radius"], p["height"]
        return [("side", Frustum(r, r, 0.0, h)), ("lid", Disk(r, 0.0, up=False)), ("lid", Disk(r, h, up=True))]
    if name == "mug":
        r, h = p["radius"], p["height"]
        a, b = p["handle_r"], p["handle_t"]
        cx = r + 0.35 * a
        # keep the part of the ring that lies outside the cup wall
        u0 = np.arccos(np.clip((r - cx) / a, -1.0, 1.0))
        return [
            ("body", Frustum(r, r, 0.0, h)),
            ("body", Frustum(r * 0.92, r * 0.92, 0.06, h, inward=True)),
            ("bottom", Disk(r, 0.0, up=False)),
            ("handle", TorusArc((cx, 0.5 * h, 0.0), a, b, -u0, u0)),
        ]
    if name == "laptop":
        w, dp, th = p["width"], p["depth"], p["thick"]
        ang = np.deg2rad(p["open_deg"])
        eye = np.eye(3)
        base = box_faces([0.0, th / 2, dp / 2], eye, np.array([w / 2, th / 2, dp / 2]))
        # the screen hinges at the back edge (z = 0), rotating up from the base plane
        c, s = np.cos(ang), np.sin(ang)
        along = np.array([0.0, s, c])
        normal = np.array([0.0, c, -s])
        axes = np.stack([eye[0], normal, along], axis=1)
        centre = np.array([0.0, th, 0.0]) + along * dp / 2 + normal * th / 2
        screen = box_faces(centre, axes, np.array([w / 2, th / 2, dp / 2]))
        return [("base", f) for f in base] + [("screen", f) for f in screen]
    if name == "camera":
        w, h, dp = p["width"], p["height"], p["depth"]
        lr, ll = p["lens_r"], p["lens_len"]
        body = box_faces([0.0, h / 2, 0.0], np.eye(3), np.array([w / 2, h / 2, dp / 2]))
        # lens points along +z out of the front face
        lens_axes = np.array([[1.0, 0, 0], [0, 0, 1.0], [0, -1.0, 0]]).T
        lens = [
            _Oriented(Frustum(lr, lr * 0.9, 0.0, ll), lens_axes, np.array([0.1 * w, 0.45 * h, dp / 2])),
            _Oriented(Disk(lr * 0.9, ll, up=True), lens_axes, np.array([0.1 * w, 0.45 * h, dp / 2])),
        ]
        return [("body", f) for f in body] + [("lens", f) for f in lens]
    raise ArgumentError(f"no shape model for category {name!r}")


@dataclass
class _Oriented:
    """A y-axis primitive re-expressed with its y-axis along ``axes[:, 1]``."""
    prim: object
    axes: np.ndarray
    origin: np.ndarray

    def area(self) -> float:
        return self.prim.area()

    def sample(self, n, rng):
        pts, nrm = self.prim.sample(n, rng)
        return pts @ self.axes.T + self.origin, nrm @ self.axes.T


def sample_surface(parts, n: int, rng):
    """Area-uniform sample of ``n`` points over all primitives.

    Returns points, normals, part names per point, and primitive index per point.
    """
    areas = np.array([prim.area() for _, prim in parts])
    counts = rng.multinomial(n, areas / areas.sum())
    pts, nrms, prim_idx = [], [], []
    for i, ((_, prim), c) in enumerate(zip(parts, counts)):
        if c == 0:
            continue
        p, q = prim.sample(int(c), rng)
        pts.append(p)
        nrms.append(q)
        prim_idx.append(np.full(int(c), i))
    prim_idx = np.concatenate(prim_idx)
    names = np.array([parts[i][0] for i in prim_idx])
    return np.concatenate(pts), np.concatenate(nrms), names, prim_idx


# -- occlusion ------------------------------------------------------------------

def hidden_point_removal(points: np.ndarray, viewpoint: np.ndarray, gamma: float = 2.0) -> np.ndarray:
    """Indices of points visible from ``viewpoint`` (spherical flip + convex hull).

    Points are flipped about a sphere of radius ``max|p - v| * 10**gamma``;
    visible points are those whose flipped image lies on the convex hull of the
    flipped set together with the viewpoint.
    """
    p = np.asarray(points, dtype=np.float64) - viewpoint
    norms = np.linalg.norm(p, axis=1, keepdims=True)
    norms = np.maximum(norms, 1e-12)
    radius = norms.max() * 10.0 ** gamma
    flipped = p + 2.0 * (radius - norms) * p / norms
    try:
        hull = ConvexHull(np.vstack([flipped, np.zeros((1, 3))]))
    except QhullError:
        return np.arange(len(points))
    vis = hull.vertices[hull.vertices < len(points)]
    return np.sort(vis)


# -- samples ------------------------------------------------------------------------

@dataclass
class InstanceSample:
    cloud: PointCloud
    gt: SimTransform
    category: CategorySpec
    canonical: np.ndarray
    instance_id: int
    parts: np.ndarray | None = None


def generate_instance(cat: CategorySpec, rng: np.random.Generator, instance_id: int = 0,
                      occlude: bool = True) -> InstanceSample:
    """Build one posed, partially observed instance of ``cat``."""
    parts = build_parts(cat, rng)
    pts, nrm, names, _ = sample_surface(parts, DENSE_POINTS, rng)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = hi - lo
    model = pts - (lo + hi) / 2
    diag = float(np.linalg.norm(extent))

    # metric size: the largest box side is drawn from [0.05, 0.4] m
    k = rng.uniform(0.05, 0.4) / extent.max()
    s = extent * k
    R = uniform_rotation(rng)
    t = rng.uniform(-0.25, 0.25, size=3)

    if occlude:
        dist = rng.uniform(0.8, 1.5)
        elev = np.deg2rad(rng.uniform(10.0, 80.0))
        azim = rng.uniform(0, 2 * np.pi)
        view = dist * np.array([np.cos(elev) * np.cos(azim), np.sin(elev), np.cos(elev) * np.sin(azim)])
        vis = hidden_point_removal(model * k, view)
    else:
        vis = np.arange(len(model))
    if len(vis) >= N_POINTS:
        pick = rng.choice(vis, size=N_POINTS, replace=False)
    else:
        pick = np.concatenate([vis, rng.choice(vis, size=N_POINTS - len(vis), replace=True)])
    pick = np.sort(pick)

    canonical = model[pick] / diag
    gt = SimTransform(R=R, t=t, s=s)
    points = gt.from_nocs(canonical)
    normals = nrm[pick] @ R.T
    colors = np.array([PART_COLORS[(cat.name, nm)] for nm in names[pick]])
    appearance = np.concatenate([normals, colors], axis=1)
    f32 = np.float32
    return InstanceSample(
        cloud=PointCloud(points.astype(f32), appearance.astype(f32)),
        gt=SimTransform(R.astype(f32), t.astype(f32), s.astype(f32)),
        category=cat,
        canonical=canonical.astype(f32),
        instance_id=int(instance_id),
        parts=names[pick],
    )


def instance_rng(seed: int, instance_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(instance_id)])


def generate_dataset(count: int, seed: int, categories=CATEGORY_NAMES) -> list[InstanceSample]:
    """``count`` samples; categories cycle through ``categories`` in order."""
    if count < 1:
        raise ArgumentError("count must be positive")
    cats = [category(c) for c in categories]
    if not cats:
        raise ArgumentError("no categories given")
    return [generate_instance(cats[i % len(cats)], instance_rng(seed, i), instance_id=i) for i in range(count)]


def augment(sample: InstanceSample, rng: np.random.Generator, max_deg: float = 20.0,
            max_shift: float = 0.02, scale_range=(0.8, 1.2)) -> InstanceSample:
    """Random similarity jitter applied consistently to points and labels.

    ``x' = k * dR (x - t) + t + dt``; the label becomes ``(dR R, t + dt, k s)``
    and the canonical coordinates are unchanged.
    """
    dR = random_rotation(max_deg, rng)
    dt = rng.uniform(-max_shift, max_shift, size=3)
    k = rng.uniform(*scale_range)
    return apply_similarity(sample, dR, dt, k)


def apply_similarity(sample: InstanceSample, dR, dt, k: float) -> InstanceSample:
    dtype = sample.cloud.points.dtype
    x = sample.cloud.points.astype(np.float64)
    t = sample.gt.t.astype(np.float64)
    R = sample.gt.R.astype(np.float64)
    pts = k * (x - t) @ dR.T + t + dt
    app = sample.cloud.appearance
    if app is not None:
        app = app.astype(np.float64).copy()
        app[:, :3] = app[:, :3] @ dR.T
        app = app.astype(dtype)
    gt = SimTransform((dR @ R).astype(dtype), (t + dt).astype(dtype), (k * sample.gt.s.astype(np.float64)).astype(dtype))
    return replace(sample, cloud=PointCloud(pts.astype(dtype), app), gt=gt)


# -- binary dataset format ---------------------------------------------------------

MAGIC = b"INKD"
VERSION = 1
_HEAD = struct.Struct("<BQ")
_SAMPLE_BYTES = _HEAD.size + 4 * (9 + 3 + 3 + N_POINTS * 3 + N_POINTS * 6 + N_POINTS * 3)


def encode_dataset(samples) -> bytes:
    if not samples:
        raise ArgumentError("cannot write an empty dataset")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(samples))]
    for s in samples:
        if len(s.cloud) != N_POINTS:
            raise ArgumentError(f"sample {s.instance_id} has {len(s.cloud)} points, expected {N_POINTS}")
        parts.append(_HEAD.pack(s.category.code, s.instance_id))
        for arr in (s.gt.R, s.gt.t, s.gt.s, s.cloud.points, s.cloud.appearance, s.canonical):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_dataset(buf: bytes) -> list[InstanceSample]:
    if len(buf) < 14:
        raise FormatError("file too short for a dataset", 0)
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    expected = 10 + count * _SAMPLE_BYTES + 4
    if len(buf) != expected:
        raise FormatError(f"dataset length {len(buf)} does not match {count} samples ({expected} bytes)",
                          min(len(buf), expected))
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("dataset CRC32 mismatch", len(buf) - 4)
    out = []
    pos = 10
    for _ in range(count):
        code, iid = _HEAD.unpack_from(buf, pos)
        if code >= len(CATEGORY_NAMES):
            raise FormatError(f"unknown category code {code}", pos)
        pos += _HEAD.size

        def take(n, shape):
            nonlocal pos
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
            return arr

        R, t, s = take(9, (3, 3)), take(3, (3,)), take(3, (3,))
        pts, app, can = take(N_POINTS * 3, (N_POINTS, 3)), take(N_POINTS * 6, (N_POINTS, 6)), take(N_POINTS * 3, (N_POINTS, 3))
        out.append(InstanceSample(PointCloud(pts, app), SimTransform(R, t, s), CATEGORIES[CATEGORY_NAMES[code]], can, int(iid)))
    return out


def write_dataset(samples, path, seed: int | None = None) -> None:
    """Write samples plus a ``.manifest`` sidecar of key=value lines."""
    path = Path(path)
    data = encode_dataset(samples)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    mix: dict[str, int] = {}
    for s in samples:
        mix[s.category.name] = mix.get(s.category.name, 0) + 1
    lines = [f"count={len(samples)}", f"version={VERSION}"]
    if seed is not None:
        lines.insert(0, f"seed={seed}")
    lines += [f"category.{k}={v}" for k, v in mix.items()]
    manifest_path(path).write_text("\n".join(lines) + "\n")


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def read_dataset(path) -> list[InstanceSample]:
    return decode_dataset(Path(path).read_bytes())
