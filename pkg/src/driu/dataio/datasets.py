"""Normalized on-disk dataset layout.

::

    root/
      split.txt        # ids under [train] / [test] headers, '#' comments
      images/<id>.ppm  # RGB fundus image
      gt/<id>.pgm      # first annotator (gold standard)
      gt2/<id>.pgm     # second annotator, optional
      fov/<id>.pgm     # field-of-view mask, optional

Task-specific annotations may live in ``gt_<task>/`` and ``gt2_<task>/``;
those take precedence over ``gt/`` and ``gt2/`` when a task is requested.
"""
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import IntegrityError
from .pnm import read_mask, read_rgb

log = logging.getLogger(__name__)

IMAGE_EXT = ".ppm"
MASK_EXT = ".pgm"

# train/test sizes and which end of the sorted id list forms the training set
LAYOUTS = {
    "drive": (20, 20, "last"),    # training images are 21-40, test 01-20
    "stare": (10, 10, "first"),
    "drions": (60, 50, "first"),
    "rimone": (99, 60, "first"),
    "generic": None,
}


@dataclass
class Sample:
    id: str
    image: np.ndarray                  # float32 (3, H, W) in [0, 1]
    gold: np.ndarray                   # uint8 (H, W), values {0, 1}
    second: np.ndarray | None = None
    fov: np.ndarray | None = None

    def __post_init__(self):
        hw = self.image.shape[1:]
        for label in ("gold", "second", "fov"):
            m = getattr(self, label)
            if m is not None and m.shape != hw:
                raise IntegrityError(
                    f"sample {self.id}: {label} mask {m.shape} does not match image {hw}")


@dataclass
class DatasetSplit:
    name: str
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        overlap = {s.id for s in self.train} & {s.id for s in self.test}
        if overlap:
            raise IntegrityError(f"ids in both train and test: {sorted(overlap)}")


def parse_split(text):
    """Parse a ``split.txt`` manifest into ``(train_ids, test_ids)``."""
    sections = {"train": [], "test": []}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            if current not in sections:
                raise IntegrityError(f"split.txt line {lineno}: unknown section [{current}]")
            continue
        if current is None:
            raise IntegrityError(f"split.txt line {lineno}: id outside a [train]/[test] section")
        sections[current].append(line)
    return sections["train"], sections["test"]


def format_split(train_ids, test_ids):
    return "[train]\n" + "".join(f"{i}\n" for i in train_ids) + \
           "[test]\n" + "".join(f"{i}\n" for i in test_ids)


def _pick_dir(root, base, task):
    if task:
        specific = root / f"{base}_{task}"
        if specific.is_dir():
            return specific
    return root / base


def _load_sample(root, sid, task):
    image_path = root / "images" / f"{sid}{IMAGE_EXT}"
    if not image_path.is_file():
        raise IntegrityError(f"missing image for id {sid!r}: {image_path}")
    gold_path = _pick_dir(root, "gt", task) / f"{sid}{MASK_EXT}"
    if not gold_path.is_file():
        raise IntegrityError(f"missing gold mask for id {sid!r}: {gold_path}")
    second_path = _pick_dir(root, "gt2", task) / f"{sid}{MASK_EXT}"
    fov_path = root / "fov" / f"{sid}{MASK_EXT}"
    return Sample(
        id=sid,
        image=read_rgb(image_path),
        gold=read_mask(gold_path),
        second=read_mask(second_path) if second_path.is_file() else None,
        fov=read_mask(fov_path) if fov_path.is_file() else None,
    )


def load_dataset(root, layout="generic", task=None):
    """Load a dataset directory into a train/test split.

    With a ``split.txt`` manifest the listed ids are used; the named layouts
    then check the split sizes. Without a manifest, named layouts split the
    sorted image ids by their fixed convention.
    """
    root = Path(root)
    if layout not in LAYOUTS:
        raise IntegrityError(f"unknown layout {layout!r}; expected one of {sorted(LAYOUTS)}")
    if not root.is_dir():
        raise IntegrityError(f"dataset directory not found: {root}")
    rule = LAYOUTS[layout]

    manifest = root / "split.txt"
    if manifest.is_file():
        train_ids, test_ids = parse_split(manifest.read_text())
    elif rule is not None:
        image_dir = root / "images"
        ids = sorted(p.name[:-len(IMAGE_EXT)] for p in image_dir.glob(f"*{IMAGE_EXT}")) \
            if image_dir.is_dir() else []
        n_train, n_test, side = rule
        if len(ids) != n_train + n_test:
            raise IntegrityError(
                f"{layout} layout expects {n_train + n_test} images, found {len(ids)}")
        if side == "first":
            train_ids, test_ids = ids[:n_train], ids[n_train:]
        else:
            test_ids, train_ids = ids[:n_test], ids[n_test:]
    else:
        raise IntegrityError(f"generic layout requires {manifest}")

    if rule is not None:
        n_train, n_test, _ = rule
        if (len(train_ids), len(test_ids)) != (n_train, n_test):
            raise IntegrityError(
                f"{layout} split must be {n_train}/{n_test}, manifest has "
                f"{len(train_ids)}/{len(test_ids)}")

    for ids, label in ((train_ids, "train"), (test_ids, "test")):
        if len(set(ids)) != len(ids):
            raise IntegrityError(f"duplicate ids in the {label} list")

    split = DatasetSplit(
        name=layout if layout != "generic" else root.name,
        train=[_load_sample(root, sid, task) for sid in train_ids],
        test=[_load_sample(root, sid, task) for sid in test_ids],
    )
    log.debug("loaded %s: %d train / %d test", split.name, len(split.train), len(split.test))
    return split


def ensure_layout_dirs(root, subdirs):
    for sub in subdirs:
        os.makedirs(Path(root) / sub, exist_ok=True)
