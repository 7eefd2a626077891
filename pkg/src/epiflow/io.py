"""Scene directories, camera text files, PFM depth maps and JSON configs.

Scene directory layout::

    <root>/
      images/00000000.png      one image per view (PNG, PPM or PGM)
      cams/00000000_cam.txt    camera of the view with the same index
      pair.txt                 source views per reference view
      scene.json               optional: name and generator settings
      gt/depth_00000000.pfm    optional ground-truth depth (full resolution)
      gt/gt.ply                optional ground-truth point cloud

Camera file (whitespace separated, blank lines ignored)::

    extrinsic
    r11 r12 r13 t1
    r21 r22 r23 t2
    r31 r32 r33 t3
    0 0 0 1

    intrinsic
    fx s cx
    0 fy cy
    0 0 1

    d_min d_max                      (or: d_min d_interval n_bins d_max)
    image_size W H                   (optional)

The extrinsic block maps world to camera coordinates.  A rotation that
is orthonormal to within ``ROTATION_TOL`` is snapped to the nearest
rotation matrix; a larger deviation is a parse error.  Without an
``image_size`` line the size comes from the caller, or else from the
principal point as ``round(2 cx + 1) x round(2 cy + 1)``.

``pair.txt``::

    <number of views>
    <reference id>
    <count> <src id> <score> <src id> <score> ...
    ... (two lines per view)

PFM depth: header ``Pf\\n<W> <H>\\n<scale>\\n`` followed by float32 rows
bottom to top; a negative scale means little-endian.  Masked pixels are
written as 0 and read back as masked (as are NaN and inf).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, EpiflowError, InvalidInputError, ParseError
from .geom import CameraView
from .pipeline import DepthField, PipelineConfig, StageParams

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")
# Text files carry rounded rotations; within this deviation they are
# projected back onto the nearest rotation, beyond it they are rejected.
ROTATION_TOL = 1e-4


# --------------------------------------------------------------------------
# cameras
# --------------------------------------------------------------------------

def _numbers(line: str, path, lineno: int, count: int | tuple[int, ...]) -> list[float]:
    counts = (count,) if isinstance(count, int) else count
    try:
        vals = [float(v) for v in line.split()]
    except ValueError:
        raise ParseError(f"{path}:{lineno}: expected numbers, got {line.strip()!r}") from None
    if len(vals) not in counts:
        raise ParseError(f"{path}:{lineno}: expected {' or '.join(map(str, counts))} numbers, "
                         f"got {len(vals)}")
    if not all(np.isfinite(vals)):
        raise ParseError(f"{path}:{lineno}: non-finite value")
    return vals


def parse_camera_text(text: str, path="<camera>", width: int | None = None,
                      height: int | None = None) -> CameraView:
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]

    def expect(pos, word):
        if pos >= len(lines) or lines[pos][1].strip().lower() != word:
            where = lines[pos][0] if pos < len(lines) else len(text.splitlines()) + 1
            raise ParseError(f"{path}:{where}: expected {word!r}")
        return pos + 1

    pos = expect(0, "extrinsic")
    if len(lines) < pos + 4:
        raise ParseError(f"{path}: truncated extrinsic block")
    ext = np.array([_numbers(lines[pos + i][1], path, lines[pos + i][0], 4) for i in range(4)])
    ext_line = lines[pos][0]
    if not np.allclose(ext[3], [0, 0, 0, 1]):
        raise ParseError(f"{path}:{lines[pos + 3][0]}: last extrinsic row must be 0 0 0 1")
    pos = expect(pos + 4, "intrinsic")
    if len(lines) < pos + 3:
        raise ParseError(f"{path}: truncated intrinsic block")
    K = np.array([_numbers(lines[pos + i][1], path, lines[pos + i][0], 3) for i in range(3)])
    k_line = lines[pos][0]
    pos += 3
    if pos >= len(lines):
        raise ParseError(f"{path}: missing depth range line")
    rng_no, rng_line = lines[pos]
    rng = _numbers(rng_line, path, rng_no, (2, 4))
    d_min, d_max = (rng[0], rng[1]) if len(rng) == 2 else (rng[0], rng[3])
    if not 0 < d_min < d_max:
        raise ParseError(f"{path}:{rng_no}: depth range must satisfy 0 < d_min < d_max")
    pos += 1
    if pos < len(lines):
        no, ln = lines[pos]
        parts = ln.split()
        if parts[0].lower() != "image_size" or len(parts) != 3:
            raise ParseError(f"{path}:{no}: unexpected content {ln.strip()!r}")
        try:
            width, height = int(parts[1]), int(parts[2])
        except ValueError:
            raise ParseError(f"{path}:{no}: image size must be two integers") from None
        if pos + 1 < len(lines):
            raise ParseError(f"{path}:{lines[pos + 1][0]}: trailing content")
    if width is None:
        width = int(round(2 * K[0, 2] + 1))
    if height is None:
        height = int(round(2 * K[1, 2] + 1))
    R, T = ext[:3, :3], ext[:3, 3]
    err = np.max(np.abs(R.T @ R - np.eye(3)))
    if err > ROTATION_TOL or np.linalg.det(R) < 0:
        raise ParseError(f"{path}:{ext_line}: rotation is not orthonormal (max deviation {err:.3g})")
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    try:
        return CameraView(K, R, T, d_min, d_max, width, height)
    except (EpiflowError, ValueError) as exc:
        msg = str(exc)
        line = k_line if ("K " in msg or "focal" in msg) else ext_line
        raise ParseError(f"{path}:{line}: {msg}") from None


def load_camera_file(path, width: int | None = None, height: int | None = None) -> CameraView:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read camera file ({exc.strerror})") from None
    except UnicodeDecodeError:
        raise ParseError(f"{path}: camera file is not text") from None
    return parse_camera_text(text, path, width, height)


def format_camera(cam: CameraView, with_size: bool = True) -> str:
    ext = np.eye(4)
    ext[:3, :3] = cam.rotation
    ext[:3, 3] = cam.translation
    out = ["extrinsic"]
    out += [" ".join(repr(float(v)) for v in row) for row in ext]
    out += ["", "intrinsic"]
    out += [" ".join(repr(float(v)) for v in row) for row in cam.intrinsics]
    out += ["", f"{float(cam.depth_min)!r} {float(cam.depth_max)!r}"]
    if with_size:
        out.append(f"image_size {cam.width} {cam.height}")
    return "\n".join(out) + "\n"


def save_camera_file(cam: CameraView, path, with_size: bool = True) -> None:
    Path(path).write_text(format_camera(cam, with_size))


# --------------------------------------------------------------------------
# PFM
# --------------------------------------------------------------------------

def write_pfm(data: np.ndarray, path, little_endian: bool = True) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise InvalidInputError("PFM depth maps are single-channel 2-D arrays")
    h, w = data.shape
    dtype = "<f4" if little_endian else ">f4"
    scale = -1.0 if little_endian else 1.0
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n{scale}\n".encode("ascii"))
        fh.write(np.flipud(data).astype(dtype).tobytes())


_PFM_HEADER = re.compile(rb"\A(P[fF])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s")


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _PFM_HEADER.match(raw)
    if not m:
        raise ParseError(f"{path}: not a PFM file (bad header)")
    if m.group(1) != b"Pf":
        raise ParseError(f"{path}: colour PFM (PF) is not a depth map")
    w, h = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError:
        raise ParseError(f"{path}: bad scale field") from None
    if w == 0 or h == 0 or scale == 0:
        raise ParseError(f"{path}: zero width, height or scale")
    body = raw[m.end():]
    if len(body) != 4 * w * h:
        raise ParseError(f"{path}: expected {4 * w * h} data bytes for {w}x{h}, found {len(body)}")
    dtype = "<f4" if scale < 0 else ">f4"
    return np.flipud(np.frombuffer(body, dtype=dtype).reshape(h, w)).astype(np.float32)


def write_depth_pfm(field_: DepthField, path, little_endian: bool = True) -> None:
    write_pfm(np.where(field_.valid, field_.depth, 0.0), path, little_endian)


def read_depth_pfm(path, stage: str = "fine") -> DepthField:
    data = read_pfm(path).astype(np.float64)
    valid = np.isfinite(data) & (data > 0)
    return DepthField(np.where(valid, data, 0.0), valid, stage)


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Decode PNG / PPM / PGM to an ``(H, W, 3)`` uint8 array."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise ParseError(f"{path}: image not found") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise ParseError(f"{path}: cannot decode image ({exc})") from None


def save_image(image: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


# --------------------------------------------------------------------------
# pair list
# --------------------------------------------------------------------------

def parse_pairs(text: str, path="<pairs>") -> list[list[int]]:
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty pair file")
    try:
        n = int(lines[0][1])
    except ValueError:
        raise ParseError(f"{path}:{lines[0][0]}: expected the number of views") from None
    if len(lines) != 1 + 2 * n:
        raise ParseError(f"{path}: expected {1 + 2 * n} non-empty lines for {n} views, found {len(lines)}")
    pairs: list[list[int] | None] = [None] * n
    for v in range(n):
        (no_ref, ln_ref), (no_src, ln_src) = lines[1 + 2 * v], lines[2 + 2 * v]
        try:
            ref = int(ln_ref)
        except ValueError:
            raise ParseError(f"{path}:{no_ref}: expected a view id") from None
        if not 0 <= ref < n or pairs[ref] is not None:
            raise ParseError(f"{path}:{no_ref}: invalid or repeated view id {ref}")
        parts = ln_src.split()
        try:
            count = int(parts[0])
            ids = [int(p) for p in parts[1::2]]
            [float(p) for p in parts[2::2]]
        except (ValueError, IndexError):
            raise ParseError(f"{path}:{no_src}: malformed source list") from None
        if len(parts) != 1 + 2 * count:
            raise ParseError(f"{path}:{no_src}: {count} sources announced, {len(parts[1:]) // 2} given")
        for s in ids:
            if not 0 <= s < n or s == ref:
                raise ParseError(f"{path}:{no_src}: invalid source id {s}")
        pairs[ref] = ids
    return pairs  # type: ignore[return-value]


def format_pairs(pairs: Sequence[Sequence[int]], scores: Sequence[Sequence[float]] | None = None) -> str:
    out = [str(len(pairs))]
    for ref, src in enumerate(pairs):
        sc = scores[ref] if scores is not None else [float(len(src) - i) for i in range(len(src))]
        out.append(str(ref))
        out.append(" ".join([str(len(src))] + [f"{s} {v:g}" for s, v in zip(src, sc)]))
    return "\n".join(out) + "\n"


def select_sources(pairs: Sequence[Sequence[int]], cams: Sequence[CameraView], n: int) -> list[list[int]]:
    """Keep the first ``n`` listed sources; pad short lists with the nearest unused views."""
    if n < 1:
        raise ConfigError("need at least one source per view")
    if len(cams) < 2:
        raise ConfigError("a scene needs at least two views")
    if n > len(cams) - 1:
        raise ConfigError(f"{n} sources requested but the scene has only {len(cams)} views")
    centres = np.array([c.center for c in cams])
    out = []
    for ref, src in enumerate(pairs):
        chosen = list(src)[:n]
        if len(chosen) < n:
            dist = np.linalg.norm(centres - centres[ref], axis=1)
            for j in np.argsort(dist, kind="stable"):
                if len(chosen) == n:
                    break
                if j != ref and j not in chosen:
                    chosen.append(int(j))
        out.append(chosen)
    return out


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

_CONFIG_KEYS = {"n_sources", "coarse", "fine", "backend", "seed", "views"}
_STAGE_KEYS = {"iterations", "m_s", "m_p"}


def config_from_dict(d: dict) -> PipelineConfig:
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(d) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    cfg = PipelineConfig()
    for stage in ("coarse", "fine"):
        if stage in d:
            sd = d[stage]
            if not isinstance(sd, dict) or set(sd) - _STAGE_KEYS:
                raise ConfigError(f"{stage}: expected an object with keys {sorted(_STAGE_KEYS)}")
            base = cfg.stage(stage)
            setattr(cfg, stage, StageParams(int(sd.get("iterations", base.iterations)),
                                            int(sd.get("m_s", base.m_s)), int(sd.get("m_p", base.m_p))))
    if "n_sources" in d:
        cfg.n_sources = int(d["n_sources"])
    if "backend" in d:
        cfg.backend = str(d["backend"])
    if "seed" in d:
        cfg.seed = int(d["seed"])
    if "views" in d:
        views = d["views"]
        if views is not None and (not isinstance(views, list) or not all(isinstance(v, int) for v in views)):
            raise ConfigError("views must be a list of integers")
        cfg.views = views
    return cfg.validate()


def config_to_dict(cfg: PipelineConfig) -> dict:
    return {"n_sources": cfg.n_sources,
            "coarse": vars(cfg.coarse).copy(), "fine": vars(cfg.fine).copy(),
            "backend": cfg.backend, "seed": cfg.seed, "views": cfg.views}


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read configuration ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    return config_from_dict(data)


# --------------------------------------------------------------------------
# scenes
# --------------------------------------------------------------------------

@dataclass(eq=False)
class SceneBundle:
    views: list[tuple[Path, CameraView]]
    pairs: list[list[int]]
    name: str = ""
    root: Path | None = None
    meta: dict = field(default_factory=dict)

    @property
    def cameras(self) -> list[CameraView]:
        return [c for _, c in self.views]

    @property
    def n_sources(self) -> int:
        return len(self.pairs[0]) if self.pairs else 0

    def load_images(self) -> list[np.ndarray]:
        return [load_image(p) for p, _ in self.views]


def _find_image(root: Path, idx: int) -> Path:
    for suf in IMAGE_SUFFIXES:
        p = root / "images" / f"{idx:08d}{suf}"
        if p.exists():
            return p
    raise ParseError(f"{root}: no image for view {idx} in images/")


def image_size(path) -> tuple[int, int]:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return im.size
    except (UnidentifiedImageError, OSError) as exc:
        raise ParseError(f"{path}: cannot decode image ({exc})") from None


def load_scene(root, config: PipelineConfig | None = None) -> SceneBundle:
    root = Path(root)
    config = config or PipelineConfig()
    pair_path = root / "pair.txt"
    if not pair_path.exists():
        raise ParseError(f"{root}: missing pair.txt")
    pairs = parse_pairs(pair_path.read_text(), pair_path)
    views = []
    for idx in range(len(pairs)):
        img = _find_image(root, idx)
        cam_path = root / "cams" / f"{idx:08d}_cam.txt"
        if not cam_path.exists():
            raise ParseError(f"{root}: missing camera file {cam_path.name}")
        w, h = image_size(img)
        text = cam_path.read_text()
        declared = re.search(r"^\s*image_size\b", text, flags=re.MULTILINE) is not None
        cam = parse_camera_text(text, cam_path, None if declared else w, None if declared else h)
        if (cam.width, cam.height) != (w, h):
            raise ParseError(f"{img}: image is {w}x{h} but {cam_path.name} declares {cam.width}x{cam.height}")
        views.append((img, cam))
    cams = [c for _, c in views]
    meta = {}
    meta_path = root / "scene.json"
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{meta_path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    # a scene cannot offer more sources than it has other views
    n = max(1, min(config.n_sources, len(cams) - 1))
    return SceneBundle(views, select_sources(pairs, cams, n),
                       str(meta.get("name", root.name)), root, meta)


def write_scene(root, images: Sequence[np.ndarray], cams: Sequence[CameraView],
                pairs: Sequence[Sequence[int]], name: str = "", meta: dict | None = None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "cams").mkdir(exist_ok=True)
    for i, (img, cam) in enumerate(zip(images, cams)):
        save_image(img, root / "images" / f"{i:08d}.png")
        save_camera_file(cam, root / "cams" / f"{i:08d}_cam.txt")
    (root / "pair.txt").write_text(format_pairs(pairs))
    info = {"name": name or root.name}
    info.update(meta or {})
    (root / "scene.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return root
