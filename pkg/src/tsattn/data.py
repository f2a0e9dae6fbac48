"""Dataset manifests and the on-disk feature cache.

A manifest is a UTF-8 CSV with header ``path,label,fold``; relative audio
paths are resolved against the manifest's directory. The feature store maps
each clip to its cached ``<clip-stem>.tsfa`` file, computing features on the
fly when no cache directory is given.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import frontend

MANIFEST_HEADER = ["path", "label", "fold"]


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # absolute after loading
    label: int
    fold: int

    @property
    def stem(self):
        return Path(self.path).stem


def load_manifest(path):
    """Parse a manifest CSV; relative clip paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: expected header {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            clip, label, fold = row
            try:
                label = int(label)
                fold = int(fold)
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: bad label/fold: {e}") from e
            if label < 0:
                raise ValueError(f"{path}:{lineno}: labels must be non-negative, got {label}")
            clip_path = Path(clip)
            if not clip_path.is_absolute():
                clip_path = base / clip_path
            entries.append(ManifestEntry(str(clip_path), label, fold))
    if not entries:
        raise ValueError(f"{path}: manifest has no entries")
    return entries


def write_manifest(path, rows):
    """Write (path, label, fold) rows under the standard header."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for clip, label, fold in rows:
            writer.writerow([clip, int(label), int(fold)])


def split_folds(entries, eval_fold):
    """Partition entries into (train, eval) by fold id."""
    train = [e for e in entries if e.fold != eval_fold]
    evals = [e for e in entries if e.fold == eval_fold]
    return train, evals


def n_classes_of(entries):
    return max(e.label for e in entries) + 1


class FeatureStore:
    """Resolves manifest entries to log-mel features.

    With a cache directory, reads ``<stem>.tsfa`` files written by the
    featurize step; otherwise featurizes the audio on demand.
    """

    def __init__(self, cfg, cache_dir=None):
        self.cfg = cfg
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None

    def cache_path(self, entry):
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{entry.stem}.tsfa"

    def waveform(self, entry):
        w = frontend.load_wav(entry.path)
        w = frontend.resample_linear(w, self.cfg.sample_rate)
        return frontend.fix_length(w, self.cfg.clip_seconds)

    def feature(self, entry):
        """T x F x 1 float32 feature for one clip."""
        cached = self.cache_path(entry)
        if cached is not None and cached.exists():
            return frontend.read_feature(cached)
        return frontend.featurize_waveform(frontend.load_wav(entry.path), self.cfg).values

    def features(self, entries):
        """Stacked (N, T, F, 1) block in manifest order."""
        feats = [self.feature(e) for e in entries]
        shapes = {f.shape for f in feats}
        if len(shapes) > 1:
            raise ValueError(f"inconsistent feature shapes in manifest: {sorted(shapes)}")
        return np.stack(feats).astype(np.float32)


def featurize_manifest(entries, out_dir, cfg, threads=1, force=False):
    """Write one ``.tsfa`` per clip; skips outputs newer than their audio.

    Returns (written, skipped, errors) where errors is a list of
    (path, message) pairs. Featurization of distinct files is independent;
    results are committed in manifest order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def job(entry):
        src = Path(entry.path)
        dst = out_dir / f"{entry.stem}.tsfa"
        if not src.exists():
            return entry, None, f"{src}: no such file"
        if not force and dst.exists() and dst.stat().st_mtime >= src.stat().st_mtime:
            return entry, None, None  # up to date
        try:
            feat = frontend.featurize_waveform(frontend.load_wav(src), cfg)
        except Exception as e:  # per-file failures are collected, not fatal
            return entry, None, f"{src}: {e}"
        return entry, feat.values, None

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, entries))
    else:
        results = [job(e) for e in entries]

    written, skipped, errors = 0, 0, []
    for entry, values, err in results:
        if err is not None:
            errors.append((entry.path, err))
        elif values is None:
            skipped += 1
        else:
            frontend.write_feature(out_dir / f"{entry.stem}.tsfa", values)
            written += 1
    return written, skipped, errors
