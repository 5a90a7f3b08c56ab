"""Dataset model: annotation/feature tables, CSV I/O, and the annotator simulator.

Annotations live in a sparse record x annotator matrix with an explicit
observation mask; absence is encoded by the mask, never by sentinel values.
All label values are milliseconds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError

ANNOTATION_HEADER = ("record_id", "annotator_id", "value_ms")
TRUTH_HEADER = ("record_id", "z_true_ms")
ANNOTATOR_TRUTH_HEADER = ("annotator_id", "phi_true_ms", "sigma_true_ms")


def _readonly(a: np.ndarray, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class AnnotationTable:
    """Record x annotator matrix of continuous labels with an observation mask.

    ``values[i, j]`` is annotator ``j``'s label for record ``i``, meaningful
    only where ``mask[i, j]`` is True. Unobserved cells are stored as NaN so
    an accidental read poisons downstream results instead of silently biasing
    them. Instances are immutable after construction.
    """

    values: np.ndarray
    mask: np.ndarray
    record_ids: tuple[str, ...]
    annotator_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 2 or values.shape != mask.shape:
            raise InputError("values and mask must be 2-d arrays of identical shape")
        n, r = values.shape
        record_ids = tuple(str(s) for s in self.record_ids)
        annotator_ids = tuple(str(s) for s in self.annotator_ids)
        if len(record_ids) != n or len(annotator_ids) != r:
            raise InputError("id lists must match the table shape")
        if len(set(record_ids)) != n:
            raise InputError("record_ids must be unique")
        if len(set(annotator_ids)) != r:
            raise InputError("annotator_ids must be unique")
        if not np.all(np.isfinite(values[mask])):
            raise InputError("every observed annotation must be finite")
        if n == 0 or r == 0:
            raise InputError("table must contain at least one record and one annotator")
        if not mask.any(axis=1).all():
            empty = [record_ids[i] for i in np.flatnonzero(~mask.any(axis=1))]
            raise InputError(f"records with no observed annotations: {empty}")
        if not mask.any(axis=0).all():
            empty = [annotator_ids[j] for j in np.flatnonzero(~mask.any(axis=0))]
            raise InputError(f"annotators with no observed annotations: {empty}")
        values = values.copy()
        values[~mask] = np.nan
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "mask", _readonly(mask, dtype=bool))
        object.__setattr__(self, "record_ids", record_ids)
        object.__setattr__(self, "annotator_ids", annotator_ids)

    @property
    def n_records(self) -> int:
        return self.values.shape[0]

    @property
    def n_annotators(self) -> int:
        return self.values.shape[1]

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Values with unobserved cells replaced by ``fill`` (for masked sums)."""
        return np.where(self.mask, self.values, fill)


@dataclass(frozen=True)
class FeatureTable:
    """Per-record feature vectors; an intercept column is appended on demand.

    With no feature file the table is empty (d = 0) with ``has_intercept``
    True, i.e. the design matrix is a single column of ones.
    """

    rows: np.ndarray
    has_intercept: bool = True
    names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2:
            raise InputError("feature rows must form a 2-d array")
        if not np.all(np.isfinite(rows)):
            raise InputError("all feature values must be finite")
        names = tuple(str(s) for s in self.names)
        if names and len(names) != rows.shape[1]:
            raise InputError("feature names must match the feature dimension")
        if not names:
            names = tuple(f"f{k + 1}" for k in range(rows.shape[1]))
        object.__setattr__(self, "rows", _readonly(rows))
        object.__setattr__(self, "names", names)

    @property
    def n_records(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    @property
    def column_names(self) -> tuple[str, ...]:
        return self.names + (("intercept",) if self.has_intercept else ())

    def design_matrix(self) -> np.ndarray:
        """Feature rows, with a constant-1 column appended when enabled."""
        if self.has_intercept:
            ones = np.ones((self.n_records, 1))
            return np.hstack([self.rows, ones]) if self.d else ones
        if self.d == 0:
            raise InputError("empty design: no features and no intercept")
        return np.asarray(self.rows)

    @classmethod
    def intercept_only(cls, n_records: int) -> "FeatureTable":
        return cls(rows=np.zeros((n_records, 0)), has_intercept=True)


@dataclass(frozen=True)
class SimulationTruth:
    """Ground truth of a simulated dataset: per-record truths, per-annotator bias/sd."""

    z_true: np.ndarray
    phi_true: np.ndarray
    sigma_true: np.ndarray

    def __post_init__(self) -> None:
        z = np.asarray(self.z_true, dtype=float)
        phi = np.asarray(self.phi_true, dtype=float)
        sigma = np.asarray(self.sigma_true, dtype=float)
        if phi.shape != sigma.shape:
            raise InputError("phi_true and sigma_true must have equal length")
        if np.any(sigma <= 0):
            raise InputError("sigma_true must be positive")
        object.__setattr__(self, "z_true", _readonly(z))
        object.__setattr__(self, "phi_true", _readonly(phi))
        object.__setattr__(self, "sigma_true", _readonly(sigma))


@dataclass(frozen=True)
class SimulationParams:
    """Knobs of the synthetic benchmark generator.

    Defaults: 548 records, 20 annotators, fully observed; annotator precisions
    drawn from Gamma(4, 0.0003), biases from Normal(10, 25^2) ms, truths from
    Normal(400, 40^2) ms.
    """

    n_records: int = 548
    n_annotators: int = 20
    lambda_shape: float = 4.0
    lambda_scale: float = 3e-4
    bias_mean: float = 10.0
    bias_sd: float = 25.0
    truth_mean: float = 400.0
    truth_sd: float = 40.0
    density: float = 1.0

    def __post_init__(self) -> None:
        if self.n_records < 1 or self.n_annotators < 1:
            raise InputError("n_records and n_annotators must be positive")
        if self.lambda_shape <= 0 or self.lambda_scale <= 0:
            raise InputError("Gamma parameters for precision must be positive")
        if self.bias_sd < 0 or self.truth_sd < 0:
            raise InputError("standard deviations must be non-negative")
        if not 0 < self.density <= 1:
            raise InputError("density must lie in (0, 1]")


def simulate(params: SimulationParams, seed: int) -> tuple[AnnotationTable, FeatureTable, SimulationTruth]:
    """Generate a synthetic annotation table with known truths.

    Per annotator j: precision lambda_j ~ Gamma(shape, scale) and bias
    phi_j ~ Normal(bias_mean, bias_sd^2). Per record i: truth
    z_i ~ Normal(truth_mean, truth_sd^2). Observed labels are
    y_ij = z_i + phi_j + eps_ij with eps_ij ~ Normal(0, 1/lambda_j).

    Deterministic for a fixed seed; the draw order (precisions, biases,
    truths, noise, mask) is part of the reproducibility contract.
    """
    rng = np.random.default_rng(seed)
    n, r = params.n_records, params.n_annotators
    lam = rng.gamma(params.lambda_shape, params.lambda_scale, size=r)
    phi = params.bias_mean + params.bias_sd * rng.standard_normal(r)
    z = params.truth_mean + params.truth_sd * rng.standard_normal(n)
    noise = rng.standard_normal((n, r)) / np.sqrt(lam)[None, :]
    y = z[:, None] + phi[None, :] + noise

    if params.density >= 1.0:
        mask = np.ones((n, r), dtype=bool)
    else:
        mask = rng.random((n, r)) < params.density
        # guarantee the table invariants: no empty record, no empty annotator
        for i in np.flatnonzero(~mask.any(axis=1)):
            mask[i, rng.integers(r)] = True
        for j in np.flatnonzero(~mask.any(axis=0)):
            mask[rng.integers(n), j] = True

    table = AnnotationTable(
        values=y,
        mask=mask,
        record_ids=tuple(f"r{i + 1:04d}" for i in range(n)),
        annotator_ids=tuple(f"a{j + 1:02d}" for j in range(r)),
    )
    truth = SimulationTruth(z_true=z, phi_true=phi, sigma_true=1.0 / np.sqrt(lam))
    return table, FeatureTable.intercept_only(n), truth


def observed_counts(table: AnnotationTable) -> tuple[np.ndarray, np.ndarray]:
    """Per-annotator and per-record observation counts (N_j, R_i)."""
    return table.mask.sum(axis=0), table.mask.sum(axis=1)


def _open_csv(path: Path | str):
    try:
        return open(path, newline="", encoding="utf-8")
    except FileNotFoundError as exc:
        raise InputError(f"file not found: {path}") from exc


def _check_header(got: list[str] | None, want: tuple[str, ...], path) -> None:
    if got is None or [c.strip() for c in got] != list(want):
        raise InputError(f"{path}: expected header {','.join(want)}, got {got}")


def load_annotations(path: Path | str) -> AnnotationTable:
    """Load a long-format annotation CSV (record_id,annotator_id,value_ms).

    Row and column order follow first appearance in the file; pairs absent
    from the file are mask-false. Malformed rows are reported with their line
    number; duplicate (record, annotator) pairs are an error.
    """
    records: dict[str, int] = {}
    annotators: dict[str, int] = {}
    entries: list[tuple[int, int, float]] = []
    seen: set[tuple[int, int]] = set()
    with _open_csv(path) as f:
        reader = csv.reader(f)
        _check_header(next(reader, None), ANNOTATION_HEADER, path)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise InputError(f"{path}: line {line_no}: expected 3 fields, got {len(row)}")
            rec, ann, raw = (c.strip() for c in row)
            if not rec or not ann:
                raise InputError(f"{path}: line {line_no}: empty record or annotator id")
            try:
                value = float(raw)
            except ValueError as exc:
                raise InputError(f"{path}: line {line_no}: bad value {raw!r}") from exc
            if not np.isfinite(value):
                raise InputError(f"{path}: line {line_no}: non-finite value {raw!r}")
            i = records.setdefault(rec, len(records))
            j = annotators.setdefault(ann, len(annotators))
            if (i, j) in seen:
                raise InputError(f"{path}: line {line_no}: duplicate pair ({rec}, {ann})")
            seen.add((i, j))
            entries.append((i, j, value))
    if not entries:
        raise InputError(f"{path}: no annotation rows")
    values = np.full((len(records), len(annotators)), np.nan)
    mask = np.zeros_like(values, dtype=bool)
    for i, j, value in entries:
        values[i, j] = value
        mask[i, j] = True
    return AnnotationTable(values, mask, tuple(records), tuple(annotators))


def save_annotations(table: AnnotationTable, path: Path | str) -> None:
    """Write the observed cells of a table in long format (row-major order)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ANNOTATION_HEADER)
        for i, rec in enumerate(table.record_ids):
            for j, ann in enumerate(table.annotator_ids):
                if table.mask[i, j]:
                    writer.writerow([rec, ann, repr(float(table.values[i, j]))])


def load_features(
    path: Path | str | None,
    record_ids: tuple[str, ...] | list[str],
    intercept: bool = True,
) -> FeatureTable:
    """Load per-record features aligned to the annotation record order.

    With ``path`` None an empty feature table is returned (intercept only).
    The file's record_ids must exactly match the annotation table's.
    """
    record_ids = tuple(str(s) for s in record_ids)
    if path is None:
        if not intercept:
            raise InputError("no feature file and no intercept: empty design")
        return FeatureTable.intercept_only(len(record_ids))
    with _open_csv(path) as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0].strip() != "record_id" or len(header) < 2:
            raise InputError(f"{path}: expected header record_id,f1,...,fd")
        names = tuple(c.strip() for c in header[1:])
        d = len(names)
        rows: dict[str, list[float]] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise InputError(f"{path}: line {line_no}: expected {d + 1} fields")
            rec = row[0].strip()
            if rec in rows:
                raise InputError(f"{path}: line {line_no}: duplicate record_id {rec!r}")
            try:
                feats = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise InputError(f"{path}: line {line_no}: bad feature value") from exc
            if not all(np.isfinite(v) for v in feats):
                raise InputError(f"{path}: line {line_no}: non-finite feature")
            rows[rec] = feats
    missing = [r for r in record_ids if r not in rows]
    extra = [r for r in rows if r not in set(record_ids)]
    if missing or extra:
        raise InputError(
            f"{path}: feature records do not match annotations "
            f"(missing {missing[:5]}, extra {extra[:5]})"
        )
    aligned = np.array([rows[r] for r in record_ids], dtype=float).reshape(len(record_ids), d)
    return FeatureTable(rows=aligned, has_intercept=intercept, names=names)


def write_truth(
    truth: SimulationTruth,
    record_ids: tuple[str, ...],
    annotator_ids: tuple[str, ...],
    truth_path: Path | str,
    annotators_path: Path | str,
) -> None:
    """Write simulator ground truth (record truths + annotator bias/sd)."""
    with open(truth_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRUTH_HEADER)
        for rec, z in zip(record_ids, truth.z_true):
            writer.writerow([rec, repr(float(z))])
    with open(annotators_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ANNOTATOR_TRUTH_HEADER)
        for ann, phi, sigma in zip(annotator_ids, truth.phi_true, truth.sigma_true):
            writer.writerow([ann, repr(float(phi)), repr(float(sigma))])


def load_reference(path: Path | str, record_ids: tuple[str, ...] | list[str]) -> np.ndarray:
    """Load a per-record reference column aligned to ``record_ids``.

    Accepts any two-column CSV whose first column is record_id (e.g. a
    truth.csv written by the simulator or an external reference file).
    """
    record_ids = tuple(str(s) for s in record_ids)
    with _open_csv(path) as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0].strip() != "record_id" or len(header) != 2:
            raise InputError(f"{path}: expected a two-column header starting with record_id")
        ref: dict[str, float] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise InputError(f"{path}: line {line_no}: expected 2 fields")
            try:
                ref[row[0].strip()] = float(row[1])
            except ValueError as exc:
                raise InputError(f"{path}: line {line_no}: bad value") from exc
    missing = [r for r in record_ids if r not in ref]
    if missing:
        raise InputError(f"{path}: reference missing records {missing[:5]}")
    out = np.array([ref[r] for r in record_ids], dtype=float)
    if not np.all(np.isfinite(out)):
        raise InputError(f"{path}: non-finite reference value")
    return out


def restrict_annotators(
    table: AnnotationTable, annotator_indices: np.ndarray | list[int]
) -> tuple[AnnotationTable, np.ndarray]:
    """Restrict a table to a subset of annotator columns.

    Records left with no observation are dropped. Returns the restricted
    table and the indices of the kept records in the original table.
    """
    cols = np.asarray(annotator_indices, dtype=int)
    if cols.size == 0:
        raise InputError("annotator subset must be non-empty")
    mask = table.mask[:, cols]
    kept = np.flatnonzero(mask.any(axis=1))
    if kept.size == 0:
        raise InputError("annotator subset leaves no usable records")
    sub = AnnotationTable(
        values=table.values[np.ix_(kept, cols)],
        mask=mask[kept],
        record_ids=tuple(table.record_ids[i] for i in kept),
        annotator_ids=tuple(table.annotator_ids[j] for j in cols),
    )
    return sub, kept
