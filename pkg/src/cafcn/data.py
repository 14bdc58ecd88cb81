"""Synthetic co-salient image pairs, portable graymap/pixmap I/O, histogram grouping.

A pair shows the same shape in the same color once in each image, at an
independent position and scale.  Each image also gets its own distractor
shapes in other colors.  Masks mark the common shape only.

On-disk dataset layout::

    root/manifest.tsv               img1<TAB>img2<TAB>gt1<TAB>gt2, relative paths
    root/pair_00000/img1.ppm        binary P6, maxval 255
    root/pair_00000/img2.ppm
    root/pair_00000/gt1.pgm         binary P5, maxval 255 (0 / 255)
    root/pair_00000/gt2.pgm
"""

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

SHAPES = ("square", "disc", "triangle")
MANIFEST = "manifest.tsv"


class SpecError(ValueError):
    pass


class FormatError(ValueError):
    """Malformed netpbm file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 32
    common_shape_kind: str = "square"
    common_color: tuple = (0.9, 0.15, 0.15)
    distractor_count: int = 2
    distractor_colors: tuple = ((0.15, 0.35, 0.9), (0.15, 0.8, 0.25), (0.95, 0.9, 0.2))
    noise_std: float = 0.05
    seed: int = 0
    background: tuple = (0.45, 0.45, 0.45)
    min_radius: int = 3
    max_radius: int = 6

    def validate(self):
        if self.common_shape_kind not in SHAPES:
            raise SpecError(f"unknown shape kind {self.common_shape_kind!r}")
        if self.distractor_count < 0:
            raise SpecError("distractor count must be >= 0")
        if self.distractor_count and not self.distractor_colors:
            raise SpecError("distractors requested but no distractor colors given")
        if not 1 <= self.min_radius <= self.max_radius:
            raise SpecError("need 1 <= min_radius <= max_radius")
        if 2 * self.max_radius > self.image_size:
            raise SpecError(f"shapes of radius {self.max_radius} cannot fit a "
                            f"{self.image_size}px image")
        colors = [self.common_color, self.background, *self.distractor_colors]
        for c in colors:
            if len(c) != 3 or min(c) < 0.0 or max(c) > 1.0:
                raise SpecError(f"colors must be RGB triples in [0, 1], got {c}")
        if self.noise_std < 0:
            raise SpecError("noise std must be >= 0")


@dataclass
class Placement:
    kind: str
    cx: int
    cy: int
    radius: int
    color: tuple

    def bbox(self):
        return (self.cx - self.radius, self.cy - self.radius,
                self.cx + self.radius, self.cy + self.radius)


@dataclass
class PairSample:
    image1: np.ndarray
    image2: np.ndarray
    mask1: np.ndarray
    mask2: np.ndarray
    metadata: dict = field(default_factory=dict)

    def as_tuple(self):
        return self.image1, self.image2, self.mask1, self.mask2


# --- rasterization -----------------------------------------------------------

def triangle_vertices(cx, cy, r):
    """Upward isosceles triangle inscribed in the ``2r`` box around (cx, cy)."""
    return [(float(cx), float(cy - r)), (float(cx + r), float(cy + r)), (float(cx - r), float(cy + r))]


def rasterize_triangle(vertices, size):
    """Pixel-center coverage with the top-left fill rule.

    Pixel ``(row, col)`` has center ``(col + 0.5, row + 0.5)`` in x-right,
    y-down coordinates.  Centers exactly on an edge count only for top edges
    (horizontal, interior below) and left edges.
    """
    (ax, ay), (bx, by), (cx, cy) = vertices
    area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if area == 0:
        return np.zeros((size, size), dtype=bool)
    if area < 0:
        (bx, by), (cx, cy) = (cx, cy), (bx, by)
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5
    py = ys + 0.5
    inside = np.ones((size, size), dtype=bool)
    for (x0, y0), (x1, y1) in (((ax, ay), (bx, by)), ((bx, by), (cx, cy)), ((cx, cy), (ax, ay))):
        dx, dy = x1 - x0, y1 - y0
        e = dx * (py - y0) - dy * (px - x0)
        top_left = (dy == 0 and dx > 0) or dy < 0
        inside &= (e > 0) | ((e == 0) & top_left)
    return inside


def rasterize(kind, cx, cy, r, size):
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5
    py = ys + 0.5
    if kind == "square":
        return (px >= cx - r) & (px < cx + r) & (py >= cy - r) & (py < cy + r)
    if kind == "disc":
        return (px - cx) ** 2 + (py - cy) ** 2 < r * r
    if kind == "triangle":
        return rasterize_triangle(triangle_vertices(cx, cy, r), size)
    raise SpecError(f"unknown shape kind {kind!r}")


# --- generation --------------------------------------------------------------

def _overlaps(a, b, margin=1):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return not (ax1 + margin <= bx0 or bx1 + margin <= ax0 or ay1 + margin <= by0 or by1 + margin <= ay0)


def _place(rng, kind, color, spec, taken, tries=200):
    for _ in range(tries):
        r = int(rng.integers(spec.min_radius, spec.max_radius + 1))
        cx = int(rng.integers(r, spec.image_size - r + 1))
        cy = int(rng.integers(r, spec.image_size - r + 1))
        p = Placement(kind, cx, cy, r, tuple(color))
        if not any(_overlaps(p.bbox(), t) for t in taken):
            return p
    raise SpecError(f"could not place a {kind} without overlap after {tries} tries")


def _render(spec, placements, rng):
    s = spec.image_size
    img = np.empty((s, s, 3))
    img[:] = spec.background
    for p in placements:
        img[rasterize(p.kind, p.cx, p.cy, p.radius, s)] = p.color
    if spec.noise_std > 0:
        img = np.clip(img + rng.normal(0.0, spec.noise_std, size=img.shape), 0.0, 1.0)
    return img


def _one_image(rng, spec):
    common = _place(rng, spec.common_shape_kind, spec.common_color, spec, [])
    placements = [common]
    for _ in range(spec.distractor_count):
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        color = spec.distractor_colors[int(rng.integers(len(spec.distractor_colors)))]
        placements.append(_place(rng, kind, color, spec, [p.bbox() for p in placements]))
    image = _render(spec, placements, rng)
    mask = rasterize(common.kind, common.cx, common.cy, common.radius, spec.image_size)
    return image, mask.astype(np.float64), placements


def generate_pair(spec: SyntheticSpec) -> PairSample:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    img1, m1, pl1 = _one_image(rng, spec)
    img2, m2, pl2 = _one_image(rng, spec)
    meta = {"spec": asdict(spec), "placements": ([asdict(p) for p in pl1], [asdict(p) for p in pl2])}
    return PairSample(img1, img2, m1, m2, meta)


def exclusive_distractor_masks(sample: PairSample, size=None):
    """Masks of image-1 distractors whose color appears nowhere in image 2."""
    if size is None:
        size = sample.image1.shape[0]
    first, second = sample.metadata["placements"]
    colors2 = {tuple(p["color"]) for p in second[1:]} | {tuple(second[0]["color"])}
    out = []
    for p in first[1:]:
        if tuple(p["color"]) not in colors2:
            out.append(rasterize(p["kind"], p["cx"], p["cy"], p["radius"], size))
    return out


def pair_seed(root_seed, index):
    return int(np.random.SeedSequence([root_seed, index]).generate_state(1)[0])


def pair_dirname(index):
    return f"pair_{index:05d}"


def generate_dataset(spec: SyntheticSpec, n, root=None, first_index=0):
    """Generate ``n`` pairs with per-pair seeds derived from ``spec.seed``.

    With ``root`` set the pairs are written to disk with a manifest listing
    them in index order.  Indices start at ``first_index`` so separate calls
    can produce disjoint splits.
    """
    spec.validate()
    samples = [generate_pair(replace(spec, seed=pair_seed(spec.seed, first_index + k)))
               for k in range(n)]
    if root is not None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        lines = []
        for k, sample in enumerate(samples):
            name = pair_dirname(first_index + k)
            d = root / name
            d.mkdir(exist_ok=True)
            save_image(sample.image1, d / "img1.ppm")
            save_image(sample.image2, d / "img2.ppm")
            save_map(sample.mask1, d / "gt1.pgm")
            save_map(sample.mask2, d / "gt2.pgm")
            lines.append("\t".join(f"{name}/{f}" for f in ("img1.ppm", "img2.ppm", "gt1.pgm", "gt2.pgm")))
        write_manifest(root / MANIFEST, lines)
    return samples


def write_manifest(path, lines):
    with open(path, "w") as fh:
        for line in lines:
            fh.write(line + "\n")


def read_manifest(path):
    """List of relative path quadruples."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated paths")
        entries.append(tuple(parts))
    return entries


def split_manifest(entries, n_eval):
    """Disjoint (train, eval) split: the last ``n_eval`` entries are held out."""
    if not 0 <= n_eval <= len(entries):
        raise ValueError("eval split larger than the manifest")
    cut = len(entries) - n_eval
    return list(entries[:cut]), list(entries[cut:])


def load_pairs(root, entries):
    root = Path(root)
    out = []
    for a, b, ga, gb in entries:
        out.append((load_image(root / a), load_image(root / b),
                    binarize(load_map(root / ga)), binarize(load_map(root / gb))))
    return out


def binarize(m):
    return (np.asarray(m) >= 0.5).astype(np.float64)


# --- netpbm I/O --------------------------------------------------------------

def quantize(values):
    """Map [0, 1] reals to 8-bit levels with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def _write_netpbm(path, magic, levels):
    h, w = levels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(levels, dtype=np.uint8).tobytes())


def save_map(values, path):
    """Write an ``H x W`` (or ``H x W x 1``) map in [0, 1] as binary P5."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3 and v.shape[2] == 1:
        v = v[..., 0]
    if v.ndim != 2:
        raise ValueError(f"saliency map must be 2-D, got shape {v.shape}")
    _write_netpbm(path, "P5", quantize(v))


def save_image(values, path):
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 3 or v.shape[2] != 3:
        raise ValueError(f"RGB image must be H x W x 3, got shape {v.shape}")
    _write_netpbm(path, "P6", quantize(v))


def _read_header(data):
    """Parse magic, width, height, maxval; returns them and the payload offset."""
    if len(data) < 2:
        raise FormatError("file too short for a magic number", 0)
    magic = data[:2].decode("ascii", errors="replace")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1] in b" \t\r\n":
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("expected an unsigned integer in header", start)
        fields.append((int(data[start:pos]), start))
    if pos >= len(data) or data[pos:pos + 1] not in b" \t\r\n":
        raise FormatError("header must end with a single whitespace byte", pos)
    pos += 1
    (w, w_at), (h, h_at), (maxval, m_at) = fields
    if w < 1:
        raise FormatError("width must be positive", w_at)
    if h < 1:
        raise FormatError("height must be positive", h_at)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", m_at)
    return magic, w, h, pos


def _read_netpbm(path, expected_magic, channels):
    data = Path(path).read_bytes()
    if data[:2] != expected_magic.encode("ascii"):
        found = data[:2].decode("ascii", errors="replace")
        raise FormatError(f"expected magic {expected_magic}, found {found!r}", 0)
    _, w, h, pos = _read_header(data)
    need = w * h * channels
    if len(data) - pos < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(data) - pos}", len(data))
    levels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    shape = (h, w, channels) if channels > 1 else (h, w)
    return levels.reshape(shape)


def load_map_levels(path):
    return _read_netpbm(path, "P5", 1)


def load_map(path):
    """Read a binary P5 graymap as float levels / 255."""
    return load_map_levels(path).astype(np.float64) / 255.0


def load_image(path):
    return _read_netpbm(path, "P6", 3).astype(np.float64) / 255.0


# --- grouping ----------------------------------------------------------------

def color_histogram(image, bins=32):
    """Concatenated per-channel intensity histograms, each normalized to sum 1."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    parts = []
    for c in range(image.shape[2]):
        hist, _ = np.histogram(image[..., c], bins=bins, range=(0.0, 1.0))
        parts.append(hist / max(hist.sum(), 1))
    return np.concatenate(parts)


def group_by_histogram(images, group_count, bins=32):
    """Partition image indices into ``group_count`` groups of near-equal size.

    Greedy: the closest unassigned pair (Euclidean histogram distance) seeds
    a group, which then absorbs the unassigned image nearest to its mean
    histogram until it reaches its target size.  Groups come out in the order
    they were formed, so the tightest cluster is first.  With
    ``group_count = n // 2`` this is greedy nearest-neighbour pairing.
    """
    n = len(images)
    if group_count < 1:
        raise ValueError("group_count must be >= 1")
    if n < 2 * group_count:
        raise ValueError(f"{n} images cannot fill {group_count} groups of at least two")
    hists = np.stack([color_histogram(im, bins) for im in images])
    dist = np.linalg.norm(hists[:, None, :] - hists[None, :, :], axis=-1)
    sizes = [n // group_count + (1 if g < n % group_count else 0) for g in range(group_count)]
    sizes.sort(reverse=True)
    unassigned = set(range(n))
    groups = []
    for size in sizes:
        idx = sorted(unassigned)
        best = None
        for a_pos, a in enumerate(idx):
            for b in idx[a_pos + 1:]:
                if best is None or dist[a, b] < best[0]:
                    best = (dist[a, b], a, b)
        group = [best[1], best[2]]
        unassigned -= set(group)
        while len(group) < size:
            centre = hists[group].mean(axis=0)
            nxt = min(sorted(unassigned), key=lambda k: np.linalg.norm(hists[k] - centre))
            group.append(nxt)
            unassigned.discard(nxt)
        groups.append(group)
    return groups
