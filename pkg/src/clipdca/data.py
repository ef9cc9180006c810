"""Procedural multi-domain benchmark, style bank, manifests and batch scheduling.

Every generator here is a pure function of its config: the same seed yields
byte-identical PNG files and manifests.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

CLASS_NAMES = (
    "circle", "square", "triangle", "cross", "ring",
    "bar", "star", "crescent", "arrow", "heart",
)
DOMAIN_NAMES = ("plain", "inverted", "pixelated", "striped", "noisy", "blurred", "grayscale", "faded",
                "vignetted", "posterized", "speckled", "outlined")
# default protocol: pretrain on the first 8 domains, finetune on "plain",
# evaluate generalization on the last 4 (never seen before finetuning)
PRETRAIN_DOMAINS = DOMAIN_NAMES[:8]
HELDOUT_DOMAINS = DOMAIN_NAMES[8:]
SOURCE_DOMAIN = "plain"

PROMPT_TEMPLATE = "an image of a {}"
CAPTION_TEMPLATE = "a {} image of a {}"


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifests."""


# --------------------------------------------------------------------------
# style transforms
#
# Each family maps (img [H,W,3] float, mask [H,W] float, params, rng) -> img.
# Families double as the corpus domains (fixed params) and as the style bank
# vocabulary (random params and combinations).


def _invert(img, mask, p, rng):
    return 1.0 - img


def _pixelate(img, mask, p, rng):
    b = int(p.get("block", 4))
    h, w, _ = img.shape
    small = img.reshape(h // b, b, w // b, b, 3).mean(axis=(1, 3))
    return np.repeat(np.repeat(small, b, axis=0), b, axis=1)


def _stripe_field(shape, period, angle):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = math.radians(angle)
    u = xx * math.cos(theta) + yy * math.sin(theta)
    return 0.5 + 0.5 * np.sign(np.sin(2 * math.pi * u / period))


def _stripes(img, mask, p, rng):
    s = _stripe_field(img.shape[:2], p.get("period", 4.0), p.get("angle", 45.0))
    k = p.get("strength", 0.6)
    bg = 1.0 - mask[..., None]
    return img * (1 - k * bg * (1 - s[..., None]))


def _noise(img, mask, p, rng):
    return img + rng.normal(0.0, p.get("sigma", 0.15), size=img.shape)


def _blur(img, mask, p, rng):
    s = p.get("sigma", 1.2)
    return ndimage.gaussian_filter(img, sigma=(s, s, 0))


def _grayscale(img, mask, p, rng):
    g = img @ np.array([0.299, 0.587, 0.114])
    return np.repeat(g[..., None], 3, axis=2)


def _fade(img, mask, p, rng):
    c = p.get("contrast", 0.3)
    return 0.5 + c * (img - 0.5)


def _outline(img, mask, p, rng):
    m = mask > 0.5
    edge = m ^ ndimage.binary_erosion(m, iterations=int(p.get("width", 1)))
    out = np.ones_like(img)
    out[edge] = 0.1
    return out


def _checker(img, mask, p, rng):
    cell = int(p.get("cell", 4))
    h, w, _ = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    board = ((yy // cell + xx // cell) % 2).astype(np.float64)
    bg = np.stack([board * 0.8 + 0.1] * 3, axis=2)
    m = mask[..., None]
    return img * m + bg * (1 - m)


def _posterize(img, mask, p, rng):
    levels = int(p.get("levels", 2))
    return np.round(np.clip(img, 0, 1) * (levels - 1)) / (levels - 1)


def _dots(img, mask, p, rng):
    spacing = int(p.get("spacing", 3))
    h, w, _ = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    grid = ((yy % spacing == 0) & (xx % spacing == 0)).astype(np.float64)
    grid = ndimage.maximum_filter(grid, size=max(1, spacing // 2))
    return img * (0.25 + 0.75 * grid[..., None])


def _tint(img, mask, p, rng):
    k = p.get("strength", 0.5)
    hue = rng.uniform(0, 1, size=3) if p.get("color") is None else np.asarray(p["color"], dtype=np.float64)
    return (1 - k) * img + k * img * hue / max(hue.max(), 1e-6)


def _speckle(img, mask, p, rng):
    frac = p.get("fraction", 0.08)
    hit = rng.random(img.shape[:2]) < frac
    salt = rng.random(img.shape[:2]) < 0.5
    out = img.copy()
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def _vignette(img, mask, p, rng):
    k = p.get("strength", 0.7)
    h, w, _ = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    r2 = ((yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2) / ((h / 2) ** 2 + (w / 2) ** 2)
    return img * (1 - k * r2)[..., None]


FAMILIES = {
    "inverted": _invert,
    "pixelated": _pixelate,
    "striped": _stripes,
    "noisy": _noise,
    "blurred": _blur,
    "grayscale": _grayscale,
    "faded": _fade,
    "outlined": _outline,
    "checkered": _checker,
    "posterized": _posterize,
    "dotted": _dots,
    "tinted": _tint,
    "speckled": _speckle,
    "vignetted": _vignette,
}

DOMAIN_STYLES: dict[str, list[tuple[str, dict]]] = {
    "plain": [],
    "inverted": [("inverted", {})],
    "pixelated": [("pixelated", {"block": 4})],
    "striped": [("striped", {"period": 4.0, "angle": 45.0, "strength": 0.6})],
    "noisy": [("noisy", {"sigma": 0.15})],
    "blurred": [("blurred", {"sigma": 1.2})],
    "grayscale": [("grayscale", {})],
    "faded": [("faded", {"contrast": 0.3})],
    "vignetted": [("vignetted", {"strength": 0.9})],
    "posterized": [("posterized", {"levels": 2})],
    "speckled": [("speckled", {"fraction": 0.08})],
    "outlined": [("outlined", {"width": 2})],
}

# per-family parameter sampler and an intensity in [0,1] used for captions
_PARAM_SAMPLERS = {
    "inverted": lambda r: ({}, 1.0),
    "pixelated": lambda r: (lambda b: ({"block": b}, {2: 0.2, 4: 0.6, 8: 1.0}[b]))(int(r.choice([2, 4, 8]))),
    "striped": lambda r: (lambda s: ({"period": float(r.uniform(3, 8)), "angle": float(r.choice([0, 45, 90, 135])), "strength": s}, s))(float(r.uniform(0.3, 0.9))),
    "noisy": lambda r: (lambda s: ({"sigma": s}, s / 0.3))(float(r.uniform(0.05, 0.3))),
    "blurred": lambda r: (lambda s: ({"sigma": s}, s / 2.0))(float(r.uniform(0.6, 2.0))),
    "grayscale": lambda r: ({}, 1.0),
    "faded": lambda r: (lambda c: ({"contrast": c}, 1.0 - c))(float(r.uniform(0.15, 0.6))),
    "outlined": lambda r: (lambda w: ({"width": w}, w / 2.0))(int(r.choice([1, 2]))),
    "checkered": lambda r: (lambda c: ({"cell": c}, 4.0 / c))(int(r.choice([2, 4, 8]))),
    "posterized": lambda r: (lambda n: ({"levels": n}, 2.0 / n))(int(r.choice([2, 3, 4]))),
    "dotted": lambda r: (lambda s: ({"spacing": s}, s / 4.0))(int(r.choice([2, 3, 4]))),
    "tinted": lambda r: (lambda k: ({"strength": k}, k))(float(r.uniform(0.3, 0.9))),
    "speckled": lambda r: (lambda f: ({"fraction": f}, f / 0.2))(float(r.uniform(0.02, 0.2))),
    "vignetted": lambda r: (lambda k: ({"strength": k}, k))(float(r.uniform(0.3, 0.9))),
}


def apply_styles(img, mask, styles, rng):
    for fam, params in styles:
        img = FAMILIES[fam](img, mask, params, rng)
    return np.clip(img, 0.0, 1.0)


# --------------------------------------------------------------------------
# shape rendering


def _polygon(cx, cy, r, n, rot, inner=None):
    pts = []
    k = n * 2 if inner else n
    for i in range(k):
        a = rot + 2 * math.pi * i / k
        rr = (r if i % 2 == 0 else r * inner) if inner else r
        pts.append((cx + rr * math.cos(a), cy + rr * math.sin(a)))
    return pts


def render_shape(name, size, rng):
    """Render one class instance; returns (rgb [H,W,3] in [0,1], mask [H,W])."""
    ss = 4
    S = size * ss
    cx = S / 2 + rng.uniform(-0.12, 0.12) * S
    cy = S / 2 + rng.uniform(-0.12, 0.12) * S
    r = rng.uniform(0.24, 0.36) * S
    rot = rng.uniform(0, 2 * math.pi)
    m = Image.new("L", (S, S), 0)
    d = ImageDraw.Draw(m)
    if name == "circle":
        d.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
    elif name == "ring":
        d.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
        d.ellipse([cx - 0.6 * r, cy - 0.6 * r, cx + 0.6 * r, cy + 0.6 * r], fill=0)
    elif name == "square":
        d.polygon(_polygon(cx, cy, r * 1.1, 4, rot), fill=255)
    elif name == "bar":
        ca, sa = math.cos(rot), math.sin(rot)
        u, v = 1.25 * r, 0.3 * r
        d.polygon([(cx + ca * u - sa * v, cy + sa * u + ca * v), (cx - ca * u - sa * v, cy - sa * u + ca * v),
                   (cx - ca * u + sa * v, cy - sa * u - ca * v), (cx + ca * u + sa * v, cy + sa * u - ca * v)],
                  fill=255)
    elif name == "triangle":
        d.polygon(_polygon(cx, cy, r * 1.15, 3, rot), fill=255)
    elif name == "heart":
        ca, sa = math.cos(rot), math.sin(rot)

        def tr(u, v):
            return (cx + u * ca - v * sa, cy + u * sa + v * ca)

        lobe = 0.55 * r
        for sgn in (-1, 1):
            ox, oy = tr(sgn * 0.5 * r, -0.35 * r)
            d.ellipse([ox - lobe, oy - lobe, ox + lobe, oy + lobe], fill=255)
        d.polygon([tr(-1.03 * r, -0.2 * r), tr(1.03 * r, -0.2 * r), tr(0, 1.1 * r)], fill=255)
    elif name == "star":
        d.polygon(_polygon(cx, cy, r * 1.2, 5, rot, inner=0.45), fill=255)
    elif name == "cross":
        w = r * 0.38
        for a in (rot, rot + math.pi / 2):
            ca, sa = math.cos(a), math.sin(a)
            pts = [(cx + ca * r + sa * w, cy + sa * r - ca * w), (cx + ca * r - sa * w, cy + sa * r + ca * w),
                   (cx - ca * r - sa * w, cy - sa * r + ca * w), (cx - ca * r + sa * w, cy - sa * r - ca * w)]
            d.polygon(pts, fill=255)
    elif name == "crescent":
        d.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
        ox, oy = cx + 0.45 * r * math.cos(rot), cy + 0.45 * r * math.sin(rot)
        d.ellipse([ox - 0.85 * r, oy - 0.85 * r, ox + 0.85 * r, oy + 0.85 * r], fill=0)
    elif name == "arrow":
        ca, sa = math.cos(rot), math.sin(rot)

        def tr(u, v):
            return (cx + u * ca - v * sa, cy + u * sa + v * ca)

        pts = [tr(-r, -0.2 * r), tr(0.2 * r, -0.2 * r), tr(0.2 * r, -0.6 * r), tr(r, 0),
               tr(0.2 * r, 0.6 * r), tr(0.2 * r, 0.2 * r), tr(-r, 0.2 * r)]
        d.polygon(pts, fill=255)
    else:
        raise ValueError(f"unknown shape {name!r}")
    mask = np.asarray(m.resize((size, size), Image.BILINEAR), dtype=np.float64) / 255.0
    fg = rng.uniform(0.0, 1.0, 3)
    bg = rng.uniform(0.0, 1.0, 3)
    # keep foreground/background separable
    while np.abs(fg - bg).sum() < 0.9:
        bg = rng.uniform(0.0, 1.0, 3)
    img = mask[..., None] * fg + (1 - mask[..., None]) * bg
    return img, mask


def render_blob(size, rng):
    """Class-free content: an irregular blob over a smooth colour field."""
    low = rng.uniform(0, 1, (3, 3, 3))
    field_ = ndimage.zoom(low, (size / 3, size / 3, 1), order=1)
    S = size * 4
    n = int(rng.integers(7, 13))
    angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    radii = rng.uniform(0.12, 0.42, n) * S
    cx, cy = rng.uniform(0.35, 0.65, 2) * S
    pts = [(cx + r * math.cos(a), cy + r * math.sin(a)) for a, r in zip(angles, radii)]
    m = Image.new("L", (S, S), 0)
    ImageDraw.Draw(m).polygon(pts, fill=255)
    mask = np.asarray(m.resize((size, size), Image.BILINEAR), dtype=np.float64) / 255.0
    ink = rng.uniform(0, 1, 3)
    img = mask[..., None] * ink + (1 - mask[..., None]) * field_
    return np.clip(img, 0, 1), mask


def _save_png(img, path: Path):
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


# --------------------------------------------------------------------------
# corpus


@dataclass
class CorpusConfig:
    n_classes: int = 10
    n_domains: int = 12
    images_per_cell: int = 20
    image_size: int = 32
    seed: int = 0
    # overrides for the per-domain transform parameters
    domain_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.n_classes, self.n_domains, self.images_per_cell, self.image_size) < 1:
            raise ValueError("all counts must be >= 1")
        if self.n_classes > len(CLASS_NAMES) or self.n_domains > len(DOMAIN_NAMES):
            raise ValueError(f"at most {len(CLASS_NAMES)} classes and {len(DOMAIN_NAMES)} domains")
        if self.image_size % 8:
            raise ValueError("image_size must be a multiple of 8")


@dataclass
class DatasetManifest:
    name: str
    split: str
    class_names: list[str]
    domain_names: list[str]
    samples: list[tuple[str, int, int]]
    root: Path = field(default=Path("."), compare=False, repr=False)

    def __post_init__(self):
        folded = [c.casefold() for c in self.class_names]
        if len(set(folded)) != len(folded):
            raise ManifestError("class names must be unique after case-folding")
        nc, nd = len(self.class_names), len(self.domain_names)
        for path, c, d in self.samples:
            if not (0 <= c < nc and 0 <= d < nd):
                raise ManifestError(f"sample {path!r} has out-of-range indices ({c}, {d})")
        self.samples = [(str(p), int(c), int(d)) for p, c, d in self.samples]
        self._cache = None

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c for _, c, _ in self.samples], dtype=np.int64)

    @property
    def domains(self) -> np.ndarray:
        return np.array([d for _, _, d in self.samples], dtype=np.int64)

    def image_path(self, i: int) -> Path:
        return self.root / self.samples[i][0]

    def captions(self, template: str = CAPTION_TEMPLATE) -> list[str]:
        return [template.format(self.domain_names[d], self.class_names[c]) for _, c, d in self.samples]

    def load_images(self) -> np.ndarray:
        """All images as float32 [N, 3, H, W] in [0, 1] (cached)."""
        if self._cache is None:
            arr = np.stack([load_png(self.image_path(i)) for i in range(len(self))])
            self._cache = np.ascontiguousarray(arr.transpose(0, 3, 1, 2))
        return self._cache

    def subset(self, domains=None, classes=None, name=None, relabel_classes=False) -> "DatasetManifest":
        """Filter by domain/class names; indices keep referring to the parent name lists
        unless ``relabel_classes`` compacts the class list to ``classes``."""
        dset = None if domains is None else {self.domain_names.index(d) for d in domains}
        cset = None if classes is None else [self.class_names.index(c) for c in classes]
        keep = [i for i, (_, c, d) in enumerate(self.samples)
                if (dset is None or d in dset) and (cset is None or c in cset)]
        class_names = list(self.class_names)
        remap = {c: c for c in range(len(class_names))}
        if relabel_classes and cset is not None:
            class_names = [self.class_names[c] for c in cset]
            remap = {c: j for j, c in enumerate(cset)}
        out = DatasetManifest(
            name=name or self.name, split=self.split, class_names=class_names,
            domain_names=list(self.domain_names),
            samples=[(self.samples[i][0], remap[self.samples[i][1]], self.samples[i][2]) for i in keep],
            root=self.root,
        )
        if self._cache is not None:
            out._cache = self._cache[keep]
        return out

    def to_json(self) -> dict:
        return {"name": self.name, "split": self.split, "class_names": list(self.class_names),
                "domain_names": list(self.domain_names), "samples": [list(s) for s in self.samples]}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
            m = cls(name=raw["name"], split=raw["split"], class_names=list(raw["class_names"]),
                    domain_names=list(raw["domain_names"]),
                    samples=[tuple(s) for s in raw["samples"]], root=path.parent)
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            raise ManifestError(f"malformed dataset manifest {path}: {e}") from e
        return m


def _writable(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory {out} is not writable: {e}") from e
    return out


def generate_corpus(config: CorpusConfig, out_dir) -> DatasetManifest:
    """Render ``n_classes`` shapes under ``n_domains`` styles and write PNGs + manifest.json."""
    out = _writable(out_dir)
    classes = list(CLASS_NAMES[: config.n_classes])
    domains = list(DOMAIN_NAMES[: config.n_domains])
    samples = []
    for di, dom in enumerate(domains):
        styles = [(f, {**p, **config.domain_params.get(dom, {})}) for f, p in DOMAIN_STYLES[dom]]
        for ci, cls in enumerate(classes):
            # one stream per cell so cells are independent of the corpus shape
            rng = np.random.default_rng([config.seed, di, ci])
            for k in range(config.images_per_cell):
                img, mask = render_shape(cls, config.image_size, rng)
                img = apply_styles(img, mask, styles, rng)
                rel = f"images/{dom}/{cls}_{k:04d}.png"
                _save_png(img, out / rel)
                samples.append((rel, ci, di))
    manifest = DatasetManifest(name="synthetic", split="all", class_names=classes,
                               domain_names=domains, samples=samples, root=out)
    manifest.save(out / "manifest.json")
    return manifest


# --------------------------------------------------------------------------
# style bank


@dataclass(eq=False)
class StyleRecord:
    style_id: str
    description: str
    hidden_state: np.ndarray | None
    image_refs: list[Path]

    def __post_init__(self):
        if not self.description.strip():
            raise ManifestError(f"style {self.style_id!r} has an empty description")
        if not self.image_refs:
            raise ManifestError(f"style {self.style_id!r} has no images")
        if self.hidden_state is not None:
            self.hidden_state = np.asarray(self.hidden_state, dtype=np.float32)
            if self.hidden_state.ndim != 1 or not np.all(np.isfinite(self.hidden_state)):
                raise ManifestError(f"style {self.style_id!r} has a non-finite or non-vector hidden state")
        self.image_refs = [Path(p) for p in self.image_refs]

    def __eq__(self, other):
        if not isinstance(other, StyleRecord):
            return NotImplemented
        hs_eq = (self.hidden_state is None and other.hidden_state is None) or (
            self.hidden_state is not None and other.hidden_state is not None
            and np.array_equal(self.hidden_state, other.hidden_state))
        return (self.style_id == other.style_id and self.description == other.description
                and hs_eq and [p.resolve() for p in self.image_refs] == [p.resolve() for p in other.image_refs])


@dataclass
class StyleBankConfig:
    n_styles: int = 64
    images_per_style: int = 8
    image_size: int = 32
    hidden_width: int = 32
    max_families: int = 2
    seed: int = 0

    def __post_init__(self):
        if min(self.n_styles, self.images_per_style, self.image_size, self.hidden_width, self.max_families) < 1:
            raise ValueError("all counts must be >= 1")


_INTENSITY = ((0.34, "slightly"), (0.67, "moderately"), (math.inf, "heavily"))


def style_caption(styles: Sequence[tuple[str, float]]) -> str:
    """Deterministic caption over (family, intensity) pairs; uses no class vocabulary."""
    parts = []
    for fam, level in styles:
        word = next(w for t, w in _INTENSITY if level <= t)
        parts.append(f"{word} {fam}")
    return "a " + " and ".join(parts) + " image"


def pseudo_hidden_state(text: str, width: int, seed: int) -> np.ndarray:
    """Seeded bag-of-words embedding; stands in for MLLM hidden states."""
    v = np.zeros(width, dtype=np.float64)
    for pos, word in enumerate(text.split()):
        h = int.from_bytes(hashlib.sha256(word.encode("utf-8")).digest()[:8], "little")
        v += np.random.default_rng([seed, h]).normal(size=width) * (1.0 + 0.1 * pos)
    return (v / np.linalg.norm(v)).astype(np.float32)


def generate_style_bank(config: StyleBankConfig, out_dir) -> list[StyleRecord]:
    """Write class-free style images, hidden-state files and styles.json."""
    out = _writable(out_dir)
    fams = sorted(FAMILIES)
    rng = np.random.default_rng([config.seed, 7919])
    records = []
    entries = []
    seen = set()
    for s in range(config.n_styles):
        # resample until the description is new so every style is distinct
        for _ in range(1000):
            k = int(rng.integers(1, config.max_families + 1))
            chosen = sorted(rng.choice(len(fams), size=min(k, len(fams)), replace=False).tolist())
            styles, levels = [], []
            for j in chosen:
                params, level = _PARAM_SAMPLERS[fams[j]](rng)
                styles.append((fams[j], params))
                levels.append((fams[j], float(np.clip(level, 0, 1))))
            caption = style_caption(levels)
            if caption not in seen:
                break
        else:
            raise ValueError(f"cannot draw {config.n_styles} distinct styles")
        seen.add(caption)
        sid = f"style_{s:04d}"
        hidden = pseudo_hidden_state(caption, config.hidden_width, config.seed)
        hs_rel = f"hidden/{sid}.f32"
        (out / "hidden").mkdir(parents=True, exist_ok=True)
        (out / hs_rel).write_bytes(hidden.astype("<f4").tobytes())
        img_rng = np.random.default_rng([config.seed, s, 104729])
        refs = []
        for i in range(config.images_per_style):
            img, mask = render_blob(config.image_size, img_rng)
            img = apply_styles(img, mask, styles, img_rng)
            rel = f"images/{sid}/{i:02d}.png"
            _save_png(img, out / rel)
            refs.append(rel)
        records.append(StyleRecord(sid, caption, hidden, [out / r for r in refs]))
        entries.append({"style_id": sid, "description": caption,
                        "hidden_state_file": hs_rel, "images": refs})
    manifest = {"hidden_state_width": config.hidden_width, "styles": entries}
    (out / "styles.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return records


def load_style_manifest(path, require_hidden_states: bool = True) -> list[StyleRecord]:
    """Load and validate a style manifest (JSON, see README for the schema).

    With ``require_hidden_states=False`` (hidden-state loss ablated) styles
    lacking a hidden-state file load with ``hidden_state=None``.
    """
    path = Path(path)
    root = path.parent
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        width = int(raw["hidden_state_width"])
        entries = raw["styles"]
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"malformed style manifest {path}: {e}") from e
    if width < 1 or not isinstance(entries, list) or not entries:
        raise ManifestError("style manifest needs a positive hidden_state_width and a non-empty styles list")
    records, seen = [], set()
    for e in entries:
        try:
            sid, desc, images = e["style_id"], e["description"], e["images"]
        except (KeyError, TypeError) as err:
            raise ManifestError(f"malformed style entry: {err}") from err
        if sid in seen:
            raise ManifestError(f"duplicate style id {sid!r}")
        seen.add(sid)
        refs = [root / p for p in images]
        for p in refs:
            if not p.is_file():
                raise ManifestError(f"style {sid!r}: missing image file {p}")
        hs = None
        hs_file = e.get("hidden_state_file")
        if hs_file is not None and (root / hs_file).is_file():
            buf = (root / hs_file).read_bytes()
            if len(buf) % 4:
                raise ManifestError(f"style {sid!r}: hidden-state file is not float32")
            hs = np.frombuffer(buf, dtype="<f4").astype(np.float32)
            if hs.shape[0] != width:
                raise ManifestError(f"style {sid!r}: hidden-state width {hs.shape[0]} != manifest width {width}")
        elif require_hidden_states:
            raise ManifestError(f"style {sid!r}: missing hidden-state file (enable the hidden-state ablation to allow this)")
        records.append(StyleRecord(sid, desc, hs, refs))
    return records


def style_images(styles: Sequence[StyleRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Stack style images as float32 [N, 3, H, W] with the owning style index per image."""
    imgs, owner = [], []
    for s, rec in enumerate(styles):
        for p in rec.image_refs:
            imgs.append(load_png(p))
            owner.append(s)
    arr = np.stack(imgs).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(arr), np.array(owner, dtype=np.int64)


# --------------------------------------------------------------------------
# two-stream scheduling


@dataclass(frozen=True)
class TaggedBatch:
    """``kind`` is "source" (sample indices into the source manifest) or
    "diffusion" (style indices plus one image index per style)."""
    kind: str
    indices: tuple[int, ...]
    styles: tuple[int, ...] = ()


def two_stream_batches(source: DatasetManifest, styles: Sequence[StyleRecord], batch_size: int,
                       ratio: float = 4, seed: int = 0, epochs: int | None = 1) -> Iterator[TaggedBatch]:
    """Interleave ``ratio`` source batches per diffusion batch.

    Each epoch visits every source sample once (last batch may be short).
    ``ratio=math.inf`` disables the diffusion stream.  ``epochs=None`` loops
    forever.  Source shuffling and style sampling use separate generators, so
    the source sequence does not depend on ``ratio``.
    """
    if len(source) == 0:
        raise ValueError("empty source manifest")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not ratio >= 1:
        raise ValueError("ratio must be >= 1")
    use_styles = not math.isinf(ratio)
    if use_styles and not styles:
        raise ValueError("diffusion stream enabled but no styles given")
    src_rng = np.random.default_rng([seed, 1])
    sty_rng = np.random.default_rng([seed, 2])
    counts = [len(s.image_refs) for s in styles]
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(int) if styles else None
    n = len(source)
    epoch = 0
    since = 0
    while epochs is None or epoch < epochs:
        perm = src_rng.permutation(n)
        for start in range(0, n, batch_size):
            yield TaggedBatch("source", tuple(int(i) for i in perm[start:start + batch_size]))
            since += 1
            if use_styles and since >= ratio:
                since = 0
                k = min(batch_size, len(styles))
                chosen = sty_rng.choice(len(styles), size=k, replace=False)
                idx = tuple(int(offsets[s] + sty_rng.integers(counts[s])) for s in chosen)
                yield TaggedBatch("diffusion", idx, tuple(int(s) for s in chosen))
        epoch += 1


def config_digest(obj) -> str:
    def default(o):
        if isinstance(o, Path):
            return str(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o))
    blob = json.dumps(obj if not hasattr(obj, "__dataclass_fields__") else asdict(obj),
                      sort_keys=True, default=default)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
