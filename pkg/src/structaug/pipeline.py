"""Batch augmentation policy, iterated application, and the operator cache."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import __version__
from .diffops import GridOperatorSet, build_diff_ops
from .geoflow import FlowField, FlowParams, geometric_augment
from .gradsource import AdvGradient, TinyClassifier, build_adv_gradient, load_gradient
from .photometric import RecolorParams, build_recolor_operator, photometric_augment, recolor_subspace
from .sparse_linalg import EigenSubspace
from .tensor_core import Image, vectorize_all

log = logging.getLogger(__name__)

CACHE_FORMAT = 1
TRANSFORMS = ("flow", "recolor")


class ConfigError(ValueError):
    pass


class CacheVersionError(RuntimeError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    transform: str = "flow"
    probability: float = 0.5
    iterations: int = 1
    flow: FlowParams = field(default_factory=FlowParams)
    recolor: RecolorParams = field(default_factory=RecolorParams)
    seed: int = 0
    mode: str = "untargeted"
    target_label: int | None = None

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"transform must be one of {TRANSFORMS}, got {self.transform!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"probability {self.probability} outside [0, 1]")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.mode not in ("untargeted", "targeted"):
            raise ConfigError(f"unknown gradient mode {self.mode!r}")


# --- gradient sources --------------------------------------------------------------


class ClassifierSource:
    """Gradients (and loss/confidence readouts) from a :class:`TinyClassifier`."""

    def __init__(self, clf: TinyClassifier, mode: str = "untargeted", target: int | None = None):
        self.clf = clf
        self.mode = mode
        self.target = target

    def __call__(self, img: Image, label: int, key=None) -> AdvGradient:
        return build_adv_gradient(self.clf, img, label, self.mode, self.target)

    def loss(self, img: Image, label: int) -> float:
        return self.clf.loss(vectorize_all(img)[None], [label])

    def probabilities(self, img: Image) -> np.ndarray:
        return self.clf.probabilities(vectorize_all(img)[None])[0]


class FileSource:
    """Precomputed gradients, one SAUG file per image key.

    Gradients from files describe the original image only, so iterated
    augmentation reuses the same file at every step.
    """

    def __init__(self, paths: dict, mode: str = "untargeted"):
        self.paths = dict(paths)
        self.mode = mode

    def __call__(self, img: Image, label: int, key=None) -> AdvGradient:
        if key not in self.paths:
            raise KeyError(f"no gradient file for {key!r}")
        return load_gradient(self.paths[key], img.data.shape, self.mode, label)


class ZeroSource:
    def __call__(self, img: Image, label: int, key=None) -> AdvGradient:
        return AdvGradient.zeros(img.data.size, label=label)


# --- operator cache -----------------------------------------------------------------


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _npz_bytes(**arrays) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def _csr_arrays(prefix, A):
    return {f"{prefix}_data": A.data, f"{prefix}_indices": A.indices,
            f"{prefix}_indptr": A.indptr, f"{prefix}_shape": np.asarray(A.shape)}


def _csr_from(npz, prefix):
    return sp.csr_matrix(
        (npz[f"{prefix}_data"], npz[f"{prefix}_indices"], npz[f"{prefix}_indptr"]),
        shape=tuple(npz[f"{prefix}_shape"]),
    )


class OperatorCache:
    """On-disk store of grid operators and per-image recolor subspaces.

    Geometric entries are keyed by ``(m, n, gamma)``; recolor entries by the
    image content hash and the parameters that shape the subspace. Writes are
    serialized by a lock and land atomically, so concurrent readers only ever
    see complete entries. ``directory=None`` keeps everything in memory.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None
        self._lock = threading.Lock()
        self._memory: dict = {}
        self.hits = 0
        self.misses = 0

    # keys
    @staticmethod
    def geo_key(m: int, n: int, gamma: float) -> str:
        return f"geo-{m}x{n}-g{float(gamma).hex()}"

    @staticmethod
    def recolor_key(image_hash: str, eps: float, k: int, mu: float, seed: int) -> str:
        ident = f"{image_hash}|{float(eps).hex()}|{k}|{float(mu).hex()}|{seed}"
        return "rec-" + hashlib.sha256(ident.encode()).hexdigest()[:32]

    def _path(self, key):
        return None if self.directory is None else self.directory / f"{key}.npz"

    def _read(self, key):
        if key in self._memory:
            return self._memory[key]
        path = self._path(key)
        if path is None or not path.exists():
            return None
        with np.load(path) as npz:
            meta = json.loads(str(npz["meta"]))
            if meta.get("format") != CACHE_FORMAT:
                raise CacheVersionError(f"{path}: cache format {meta.get('format')} != {CACHE_FORMAT}")
            arrays = {k: npz[k] for k in npz.files if k != "meta"}
        return meta, arrays

    def _store(self, key, meta, arrays):
        meta = {"format": CACHE_FORMAT, "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
                "package_version": __version__, **meta}
        with self._lock:
            path = self._path(key)
            if path is not None and not path.exists():
                _atomic_write(path, _npz_bytes(meta=np.asarray(json.dumps(meta)), **arrays))
            self._memory.setdefault(key, (meta, arrays))
            return self._memory[key]

    def contains(self, key) -> bool:
        path = self._path(key)
        return key in self._memory or (path is not None and path.exists())

    def check(self, key) -> None:
        """Raise :class:`CacheVersionError` if an existing entry is stale."""
        self._read(key)

    # geometric operators
    def geo_ops(self, m: int, n: int, gamma: float) -> GridOperatorSet:
        key = self.geo_key(m, n, gamma)
        entry = self._read(key)
        if entry is None:
            self.misses += 1
            ops = build_diff_ops(m, n)
            arrays = {**_csr_arrays("Dx", ops.Dx), **_csr_arrays("Dy", ops.Dy), **_csr_arrays("P", ops.P)}
            entry = self._store(key, {"kind": "geo", "m": m, "n": n, "gamma": gamma}, arrays)
        else:
            self.hits += 1
        _, arrays = entry
        return GridOperatorSet(_csr_from(arrays, "Dx"), _csr_from(arrays, "Dy"), _csr_from(arrays, "P"), m, n)

    # recolor subspaces
    def recolor_subspace(self, img: Image, params: RecolorParams) -> EigenSubspace:
        key = self.recolor_key(img.content_hash(), params.eps, params.k, params.mu, params.seed)
        entry = self._read(key)
        if entry is None:
            self.misses += 1
            op = build_recolor_operator(img, params.eps)
            sub = recolor_subspace(op, params.k, params.mu, params.seed)
            meta = {"kind": "recolor", "image": op.image_id, "eps": params.eps, "k": params.k,
                    "mu": params.mu, "seed": params.seed, "iterations": sub.iterations}
            entry = self._store(key, meta, {"vectors": sub.vectors, "values": sub.values})
        else:
            self.hits += 1
        meta, arrays = entry
        return EigenSubspace(arrays["vectors"], arrays["values"], meta["mu"], meta["seed"],
                             list(meta.get("iterations", [])))


# --- single-image application ------------------------------------------------------------


@dataclass
class AugmentResult:
    image: Image
    applied: bool
    gradient: AdvGradient | None = None
    flow: FlowField | None = None


class Augmenter:
    """Applies one configured transform, sharing grid operators between calls."""

    def __init__(self, cfg: AugmentConfig, cache: OperatorCache | None = None):
        self.cfg = cfg
        self.cache = cache
        self._ops: dict = {}
        self._lock = threading.Lock()

    def grid_ops(self, m: int, n: int):
        gamma = self.cfg.flow.gamma
        key = (m, n, gamma)
        with self._lock:
            if key not in self._ops:
                ops = self.cache.geo_ops(m, n, gamma) if self.cache else build_diff_ops(m, n)
                system = ops.system(gamma) if gamma > 0 else None
                self._ops[key] = (ops, system)
            return self._ops[key]

    def apply(self, img: Image, g: AdvGradient) -> AugmentResult:
        if self.cfg.transform == "flow":
            ops, system = self.grid_ops(*img.shape)
            out, flow = geometric_augment(img, g, self.cfg.flow, ops=ops, system=system)
            return AugmentResult(out, True, g, flow)
        params = self.cfg.recolor
        subspace = None
        if params.mode == "project" and self.cache is not None:
            subspace = self.cache.recolor_subspace(img, params)
        return AugmentResult(photometric_augment(img, g, params, subspace=subspace), True, g)


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per image, so worker count cannot change decisions."""
    return np.random.default_rng([seed, index])


def should_augment(cfg: AugmentConfig, index: int) -> bool:
    return bool(image_rng(cfg.seed, index).random() < cfg.probability)


@dataclass
class BatchResult:
    images: list
    applied: list
    results: list

    @property
    def modified_count(self) -> int:
        return sum(self.applied)


def augment_batch(
    items,
    source,
    cfg: AugmentConfig,
    cache: OperatorCache | None = None,
    workers: int = 1,
    keys=None,
) -> BatchResult:
    """Augment each ``(image, label)`` pair independently with ``cfg.probability``.

    Skipped images are returned as the same objects. Adversarial transforms
    run on the raw input; any standard augmentation belongs after this call.
    ``keys`` (defaults to the indices) are passed to the gradient source.
    """
    items = list(items)
    keys = list(range(len(items))) if keys is None else list(keys)
    if cfg.transform == "flow" and items:
        shapes = {img.shape for img, _ in items}
        if len(shapes) > 1:
            raise ConfigError(f"flow batches need one image size, got {sorted(shapes)}")
    aug = Augmenter(cfg, cache)

    def work(idx):
        img, label = items[idx]
        if not should_augment(cfg, idx):
            return AugmentResult(img, False)
        if cfg.iterations > 1:
            traj = iterate_augment(img, label, source, cfg, cache, key=keys[idx], augmenter=aug)
            return AugmentResult(traj.images[-1], True, traj.gradients[-1], traj.flows[-1] if traj.flows else None)
        return aug.apply(img, source(img, label, keys[idx]))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, range(len(items))))
    else:
        results = [work(i) for i in range(len(items))]
    return BatchResult([r.image for r in results], [r.applied for r in results], results)


@dataclass
class Trajectory:
    images: list
    gradients: list
    flows: list
    losses: list
    confidences: list


def iterate_augment(
    img: Image,
    label: int,
    source,
    cfg: AugmentConfig,
    cache: OperatorCache | None = None,
    key=None,
    augmenter: Augmenter | None = None,
) -> Trajectory:
    """Regenerate the gradient on each intermediate image and reapply the transform.

    Returns ``cfg.iterations + 1`` images (the input first). Loss and
    true-label confidence are recorded when the source can report them.
    """
    aug = augmenter or Augmenter(cfg, cache)
    readout = hasattr(source, "loss") and hasattr(source, "probabilities")
    traj = Trajectory([img], [], [], [], [])

    def record(x):
        if readout:
            traj.losses.append(source.loss(x, label))
            traj.confidences.append(float(source.probabilities(x)[label]))

    record(img)
    current = img
    for _ in range(cfg.iterations):
        g = source(current, label, key)
        res = aug.apply(current, g)
        current = res.image
        traj.images.append(current)
        traj.gradients.append(g)
        if res.flow is not None:
            traj.flows.append(res.flow)
        record(current)
    return traj


def precompute(targets, cfg: AugmentConfig, cache: OperatorCache) -> list[tuple[str, bool]]:
    """Populate ``cache`` for grid sizes (flow) or images (recolor).

    ``targets`` is a list of ``(m, n)`` pairs or :class:`Image` objects.
    Returns ``(key, created)`` per target; rerunning creates nothing new.
    """
    out = []
    for t in targets:
        if cfg.transform == "flow":
            m, n = t.shape if isinstance(t, Image) else t
            key = cache.geo_key(m, n, cfg.flow.gamma)
            existed = cache.contains(key)
            if existed:
                cache.check(key)
            cache.geo_ops(m, n, cfg.flow.gamma)
        else:
            if not isinstance(t, Image):
                raise ConfigError("recolor precompute needs images")
            p = cfg.recolor
            key = cache.recolor_key(t.content_hash(), p.eps, p.k, p.mu, p.seed)
            existed = cache.contains(key)
            if existed:
                cache.check(key)
            cache.recolor_subspace(t, p)
        out.append((key, not existed))
    return out


def with_overrides(cfg: AugmentConfig, **kw) -> AugmentConfig:
    """Copy of ``cfg`` with top-level, ``flow_*`` or ``recolor_*`` fields replaced."""
    flow_kw = {k[5:]: v for k, v in kw.items() if k.startswith("flow_")}
    rec_kw = {k[8:]: v for k, v in kw.items() if k.startswith("recolor_")}
    top = {k: v for k, v in kw.items() if not k.startswith(("flow_", "recolor_"))}
    return replace(cfg, flow=replace(cfg.flow, **flow_kw), recolor=replace(cfg.recolor, **rec_kw), **top)
