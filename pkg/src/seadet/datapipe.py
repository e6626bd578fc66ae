"""Procedural scene generation and multi-domain dataset construction.

Scenes are desk-scale RGB canvases with 4 shape classes (disk, ellipse,
star, rectangle) on a textured background. A dataset build partitions the
base-scene pool into 7 equal parts, renders each part under one water-quality
domain (6 source + 1 held-out target), and persists COCO-style annotations.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from . import boxes as boxops
from . import watermodel

GENERATOR_VERSION = 1

CLASS_NAMES = ("disk", "ellipse", "star", "rectangle")


@dataclass(frozen=True)
class SceneSpec:
    canvas_size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 10
    max_size: int = 24
    occlusion_probability: float = 0.2
    contrast_range: tuple = (0.7, 1.0)
    seed: int = 0


@dataclass
class DatasetManifest:
    root: str
    domains: list
    source_domains: list
    target_domain: int
    splits: dict           # domain_id -> {split -> [relative image paths]}
    seed: int
    generator_version: int = GENERATOR_VERSION
    manifest_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "domains": self.domains,
            "source_domains": self.source_domains,
            "target_domain": self.target_domain,
            "splits": self.splits,
            "seed": self.seed,
            "generator_version": self.generator_version,
            "manifest_hash": self.manifest_hash,
        }


def _image_seed(base_seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{base_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _star_points(cx, cy, outer, inner, rotation, n=5):
    pts = []
    for i in range(2 * n):
        r = outer if i % 2 == 0 else inner
        ang = rotation + i * math.pi / n
        pts.append((cx + r * math.cos(ang), cy + r * math.sin(ang)))
    return pts


def generate_scene(spec: SceneSpec, rng_seed: int):
    """Render one clear scene; returns (image (H,W,3) in [0,1], annotations).

    Annotations are (Box, class_id) pairs; boxes tightly enclose the visible
    (post-occlusion) extent of each shape. Fully occluded objects are dropped.
    """
    rng = np.random.default_rng(rng_seed)
    size = spec.canvas_size

    # sandy, slightly textured background
    base = np.array([0.62, 0.58, 0.46]) + rng.uniform(-0.06, 0.06, size=3)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    img += rng.normal(0.0, 0.02, size=(size, size, 3))

    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    contrast = float(rng.uniform(*spec.contrast_range))

    palette = {
        0: np.array([0.85, 0.25, 0.2]),   # disk
        1: np.array([0.2, 0.65, 0.3]),    # ellipse
        2: np.array([0.95, 0.8, 0.2]),    # star
        3: np.array([0.25, 0.35, 0.85]),  # rectangle
    }

    masks = []
    labels = []
    centers = []
    for _ in range(n_objects):
        cls = int(rng.integers(0, 4))
        obj_size = float(rng.uniform(spec.min_size, spec.max_size))
        if centers and rng.random() < spec.occlusion_probability:
            # force overlap with a previous object
            px, py = centers[int(rng.integers(0, len(centers)))]
            cx = float(np.clip(px + rng.uniform(-obj_size / 2, obj_size / 2),
                               obj_size / 2, size - obj_size / 2))
            cy = float(np.clip(py + rng.uniform(-obj_size / 2, obj_size / 2),
                               obj_size / 2, size - obj_size / 2))
        else:
            cx = float(rng.uniform(obj_size / 2, size - obj_size / 2))
            cy = float(rng.uniform(obj_size / 2, size - obj_size / 2))
        centers.append((cx, cy))

        layer = Image.new("L", (size, size), 0)
        draw = ImageDraw.Draw(layer)
        half = obj_size / 2
        if cls == 0:
            draw.ellipse([cx - half, cy - half, cx + half, cy + half], fill=255)
        elif cls == 1:
            ry = half * float(rng.uniform(0.45, 0.7))
            draw.ellipse([cx - half, cy - ry, cx + half, cy + ry], fill=255)
        elif cls == 2:
            rotation = float(rng.uniform(0, 2 * math.pi))
            pts = _star_points(cx, cy, half, half * 0.45, rotation)
            draw.polygon(pts, fill=255)
        else:
            rw = half
            rh = half * float(rng.uniform(0.5, 1.0))
            draw.rectangle([cx - rw, cy - rh, cx + rw, cy + rh], fill=255)
        masks.append(np.asarray(layer, dtype=np.uint8) > 0)
        labels.append(cls)

    annotations = []
    for i, (mask, cls) in enumerate(zip(masks, labels)):
        color = palette[cls] * contrast + (1 - contrast) * base
        color += rng.uniform(-0.05, 0.05, size=3)
        img[mask] = color
        # later objects occlude earlier ones
        visible = mask.copy()
        for later in masks[i + 1:]:
            visible &= ~later
        ys, xs = np.nonzero(visible)
        if len(ys) == 0:
            continue
        box = boxops.Box(float(xs.min()), float(ys.min()),
                         float(xs.max() + 1), float(ys.max() + 1))
        annotations.append((box, cls))

    return np.clip(img, 0.0, 1.0), annotations


# ---------------------------------------------------------------------------
# annotation persistence (COCO-style)
# ---------------------------------------------------------------------------

def write_annotations(path: str, images: list, annotations: list) -> None:
    """Write COCO-style annotations atomically.

    images: [{"id", "file_name", "width", "height"}];
    annotations: [{"id", "image_id", "category_id", "bbox": [x, y, w, h]}].
    """
    payload = {
        "images": images,
        "annotations": annotations,
        "categories": [
            {"id": i, "name": name} for i, name in enumerate(CLASS_NAMES)
        ],
    }
    _atomic_write_json(path, payload)


def read_annotations(path: str) -> dict:
    """Read and validate COCO-style annotations; errors name the bad record."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    for key in ("images", "annotations", "categories"):
        if key not in data:
            raise ValueError(f"missing top-level key: {key}")
    cat_ids = {c["id"] for c in data["categories"]}
    image_ids = {im["id"] for im in data["images"]}
    for idx, ann in enumerate(data["annotations"]):
        bbox = ann.get("bbox")
        if bbox is None or len(bbox) != 4:
            raise ValueError(f"annotation {idx}: malformed bbox")
        if bbox[2] <= 0 or bbox[3] <= 0:
            raise ValueError(
                f"annotation {idx}: bbox width/height must be positive")
        if ann.get("category_id") not in cat_ids:
            raise ValueError(f"annotation {idx}: unknown category_id")
        if ann.get("image_id") not in image_ids:
            raise ValueError(f"annotation {idx}: unknown image_id")
    return data


def _atomic_write_json(path: str, payload) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _save_png(path: str, image: np.ndarray) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)),
                               suffix=".png")
    os.close(fd)
    Image.fromarray(arr, "RGB").save(tmp, format="PNG")
    os.replace(tmp, path)


def load_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def annotations_to_coco(ann_list, image_id: int, start_ann_id: int):
    out = []
    for k, (box, cls) in enumerate(ann_list):
        out.append({
            "id": start_ann_id + k,
            "image_id": image_id,
            "category_id": int(cls),
            "bbox": [box.x1, box.y1, box.width, box.height],
        })
    return out


def coco_to_annotations(data: dict, image_id: int):
    """Back to (Box, class_id) pairs for one image."""
    out = []
    for ann in data["annotations"]:
        if ann["image_id"] != image_id:
            continue
        x, y, w, h = ann["bbox"]
        out.append((boxops.Box(x, y, x + w, y + h), int(ann["category_id"])))
    return out


# ---------------------------------------------------------------------------
# multi-domain dataset build
# ---------------------------------------------------------------------------

def build_multidomain_dataset(out_dir: str, scene_spec: SceneSpec,
                              domain_specs: list, images_per_domain: int,
                              val_fraction: float = 0.2,
                              seed: int = 0) -> DatasetManifest:
    """Build the 7-domain dataset: 6 source domains with train/val splits and
    one held-out target domain that appears only in its val split.

    The base-scene pool is split into 7 disjoint parts, one per domain; each
    part is rendered clear and then color-transformed by its domain spec.
    The clear render is persisted beside the domain images (clear/) so the
    siamese branch of DG training can re-transform the same scene.
    """
    if len(domain_specs) != 7:
        raise ValueError(f"expected exactly 7 domain specs, got {len(domain_specs)}")
    domain_ids = [d.domain_id for d in domain_specs]
    if len(set(domain_ids)) != 7:
        raise ValueError("domain ids must be unique")
    source_ids = domain_ids[:6]
    target_id = domain_ids[6]

    splits_index: dict = {}
    scene_index = 0
    for d_pos, spec in enumerate(domain_specs):
        transform = watermodel.make_domain_transform(spec)
        is_target = spec.domain_id == target_id
        n_val = images_per_domain if is_target else max(
            1, int(round(val_fraction * images_per_domain)))
        split_of = (["val"] * images_per_domain if is_target else
                    ["train"] * (images_per_domain - n_val) + ["val"] * n_val)

        per_split: dict = {}
        for local_idx in range(images_per_domain):
            idx = scene_index
            scene_index += 1
            img_seed = _image_seed(seed, idx)
            clear, anns = generate_scene(scene_spec, img_seed)
            domain_img = transform(clear)
            split = split_of[local_idx]
            bucket = per_split.setdefault(
                split, {"images": [], "annotations": [], "files": []})
            image_id = len(bucket["images"])
            fname = f"scene_{idx:05d}.png"
            rel_img = f"domain_{spec.domain_id}/{split}/images/{fname}"
            rel_clear = f"domain_{spec.domain_id}/{split}/clear/{fname}"
            _save_png(os.path.join(out_dir, rel_img), domain_img)
            _save_png(os.path.join(out_dir, rel_clear), clear)
            bucket["images"].append({
                "id": image_id,
                "file_name": f"images/{fname}",
                "width": scene_spec.canvas_size,
                "height": scene_spec.canvas_size,
            })
            bucket["annotations"].extend(
                annotations_to_coco(anns, image_id,
                                    len(bucket["annotations"])))
            bucket["files"].append(rel_img)

        splits_index[str(spec.domain_id)] = {}
        for split, bucket in per_split.items():
            write_annotations(
                os.path.join(out_dir, f"domain_{spec.domain_id}", split,
                             "annotations.json"),
                bucket["images"], bucket["annotations"])
            splits_index[str(spec.domain_id)][split] = bucket["files"]

    manifest = DatasetManifest(
        root=out_dir,
        domains=domain_ids,
        source_domains=source_ids,
        target_domain=target_id,
        splits=splits_index,
        seed=seed,
    )
    body = manifest.to_dict()
    body.pop("manifest_hash")
    manifest.manifest_hash = hashlib.sha256(
        json.dumps(body, sort_keys=True).encode()).hexdigest()
    _atomic_write_json(os.path.join(out_dir, "manifest.json"),
                       manifest.to_dict())
    return manifest


def load_manifest(root: str) -> DatasetManifest:
    with open(os.path.join(root, "manifest.json"), encoding="utf-8") as fh:
        data = json.load(fh)
    return DatasetManifest(
        root=root,
        domains=data["domains"],
        source_domains=data["source_domains"],
        target_domain=data["target_domain"],
        splits=data["splits"],
        seed=data["seed"],
        generator_version=data["generator_version"],
        manifest_hash=data["manifest_hash"],
    )


def load_split(root: str, domain_id: int, split: str):
    """Load (image, clear_image, annotations) triples for one domain split."""
    base = os.path.join(root, f"domain_{domain_id}", split)
    data = read_annotations(os.path.join(base, "annotations.json"))
    samples = []
    for im in data["images"]:
        img = load_png(os.path.join(base, im["file_name"]))
        clear_path = os.path.join(
            base, im["file_name"].replace("images/", "clear/"))
        clear = load_png(clear_path) if os.path.exists(clear_path) else None
        anns = coco_to_annotations(data, im["id"])
        samples.append({
            "image": img,
            "clear": clear,
            "annotations": anns,
            "domain_id": domain_id,
            "file_name": im["file_name"],
        })
    return samples
