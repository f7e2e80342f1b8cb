"""Cohort and matched-structure data model.

A :class:`Cohort` holds one :class:`Subject` per row of the input table.  A
:class:`FullMatch` partitions the cohort into strata, each containing either
exactly one instrument-1 subject or exactly one instrument-0 subject.

Numeric views of a cohort (instrument vector, covariate matrix with ``nan`` for
missing cells, ...) are computed lazily and cached, so the objects stay cheap to
build inside Monte Carlo loops.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import ValidationError

RESERVED_COLUMNS = ("id", "instrument", "exposure", "outcome")
MISSING_TOKENS = frozenset({"", "na", "nan", "null"})


@dataclass(frozen=True)
class Subject:
    """One study unit.

    ``exposure`` and ``outcome`` are ``None`` only in a blinded cohort, where the
    columns were deliberately not parsed.
    """

    id: str
    instrument: int
    exposure: float | None
    outcome: float | None
    covariates: tuple[float | None, ...] = ()

    @property
    def missing_mask(self) -> tuple[bool, ...]:
        return tuple(v is None for v in self.covariates)


@dataclass(frozen=True)
class Cohort:
    """An immutable collection of subjects sharing a covariate layout."""

    subjects: tuple[Subject, ...]
    covariate_names: tuple[str, ...] = ()
    blind: bool = False

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if not self.subjects:
            raise ValidationError("cohort has no subjects")
        arity = len(self.covariate_names)
        seen = set()
        for s in self.subjects:
            if s.instrument not in (0, 1):
                raise ValidationError(f"subject {s.id!r}: instrument must be 0 or 1")
            if len(s.covariates) != arity:
                raise ValidationError(f"subject {s.id!r}: expected {arity} covariates")
            if s.id in seen:
                raise ValidationError(f"duplicate subject id {s.id!r}")
            seen.add(s.id)
            if not self.blind:
                for label, value in (("exposure", s.exposure), ("outcome", s.outcome)):
                    if value is None or not math.isfinite(value):
                        raise ValidationError(f"subject {s.id!r}: {label} missing or not finite")
        n_treated = sum(s.instrument for s in self.subjects)
        if n_treated == 0 or n_treated == len(self.subjects):
            raise ValidationError("cohort needs at least one subject at each instrument level")

    def __len__(self) -> int:
        return len(self.subjects)

    @classmethod
    def from_arrays(
        cls,
        instrument,
        exposure,
        outcome,
        covariates=None,
        ids: Sequence[str] | None = None,
        covariate_names: Sequence[str] | None = None,
    ) -> "Cohort":
        """Build a fully observed cohort from numeric arrays."""
        z = np.asarray(instrument).astype(int)
        n = z.shape[0]
        x = np.empty((n, 0)) if covariates is None else np.asarray(covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if ids is None:
            width = len(str(n))
            ids = [f"s{i + 1:0{width}d}" for i in range(n)]
        if covariate_names is None:
            covariate_names = [f"x{k + 1}" for k in range(x.shape[1])]
        d = np.asarray(exposure, dtype=float)
        r = np.asarray(outcome, dtype=float)
        rows = x.tolist()
        subjects = tuple(
            Subject(str(ids[i]), int(z[i]), float(d[i]), float(r[i]), tuple(None if v != v else v for v in rows[i]))
            for i in range(n)
        )
        cohort = cls(subjects, tuple(covariate_names))
        # Seed the caches with the arrays we already have.
        cohort.__dict__["instrument"] = z.copy()
        cohort.__dict__["exposure"] = d.copy()
        cohort.__dict__["outcome"] = r.copy()
        cohort.__dict__["covariates"] = x.copy()
        return cohort

    @cached_property
    def ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.subjects)

    @cached_property
    def index(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.ids)}

    @cached_property
    def instrument(self) -> np.ndarray:
        return np.array([s.instrument for s in self.subjects], dtype=int)

    @cached_property
    def exposure(self) -> np.ndarray:
        return np.array([np.nan if s.exposure is None else s.exposure for s in self.subjects])

    @cached_property
    def outcome(self) -> np.ndarray:
        return np.array([np.nan if s.outcome is None else s.outcome for s in self.subjects])

    @cached_property
    def covariates(self) -> np.ndarray:
        """Covariate matrix of shape (N, p) with ``nan`` marking missing cells."""
        rows = [[np.nan if v is None else v for v in s.covariates] for s in self.subjects]
        return np.array(rows, dtype=float).reshape(len(self.subjects), len(self.covariate_names))

    @property
    def n_treated(self) -> int:
        return int(self.instrument.sum())

    @property
    def n_control(self) -> int:
        return len(self) - self.n_treated

    @cached_property
    def missing_counts(self) -> dict[str, int]:
        counts = np.isnan(self.covariates).sum(axis=0)
        return {name: int(c) for name, c in zip(self.covariate_names, counts)}


def _parse_number(text: str, what: str, row: int) -> float | None:
    text = text.strip()
    if text.lower() in MISSING_TOKENS:
        return None
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(f"row {row}: {what} value {text!r} is not numeric") from None
    if not math.isfinite(value):
        raise ValidationError(f"row {row}: {what} value {text!r} is not finite")
    return value


def read_rows(path: str | Path, exclude: Iterable[str] = ()) -> tuple[list[str], list[dict[str, str]]]:
    """Read a delimiter-separated table with a header row.

    The delimiter is tab when the header contains a tab, comma otherwise.  Columns
    named in ``exclude`` are dropped while reading and never reach the caller.

    Returns:
        The retained header and the rows as dictionaries of raw strings.
    """
    exclude = set(exclude)
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    if not lines:
        raise ValidationError(f"{path}: empty input")
    delimiter = "\t" if "\t" in lines[0] else ","
    reader = csv.reader(lines, delimiter=delimiter)
    header = [h.strip() for h in next(reader)]
    keep = [i for i, h in enumerate(header) if h not in exclude]
    rows = []
    for raw in reader:
        if not raw or all(not c.strip() for c in raw):
            continue
        if len(raw) != len(header):
            raise ValidationError(f"{path}: row {len(rows) + 2} has {len(raw)} fields, expected {len(header)}")
        rows.append({header[i]: raw[i] for i in keep})
    return [header[i] for i in keep], rows


def validate_cohort(
    raw_rows: Sequence[Mapping[str, str]],
    *,
    blind: bool = False,
    covariate_names: Sequence[str] | None = None,
) -> Cohort:
    """Turn raw string records into a validated :class:`Cohort`.

    Args:
        raw_rows: Records keyed by column name.  Required keys are
            ``instrument`` and, unless ``blind``, ``exposure`` and ``outcome``.
            An ``id`` column is optional; row numbers are used without it.
        blind: Skip the exposure and outcome columns entirely.  Used by the
            design stage so matching can never depend on outcomes.
        covariate_names: Explicit covariate columns.  Defaults to every column
            that is not reserved, in header order.

    Raises:
        ValidationError: on a non-binary instrument, a missing or non-numeric
            exposure/outcome, or when one instrument level is absent.
    """
    if not raw_rows:
        raise ValidationError("no rows")
    columns = list(raw_rows[0].keys())
    if "instrument" not in columns:
        raise ValidationError("required column 'instrument' is absent")
    if not blind:
        for required in ("exposure", "outcome"):
            if required not in columns:
                raise ValidationError(f"required column {required!r} is absent")
    if covariate_names is None:
        covariate_names = [c for c in columns if c not in RESERVED_COLUMNS]
    width = len(str(len(raw_rows)))
    subjects = []
    for k, row in enumerate(raw_rows):
        line = k + 2
        sid = row.get("id", "").strip() or f"row{k + 1:0{width}d}"
        z_text = row["instrument"].strip()
        if z_text not in ("0", "1"):
            raise ValidationError(f"row {line}: instrument must be 0 or 1, got {z_text!r}")
        d = r = None
        if not blind:
            d = _parse_number(row["exposure"], "exposure", line)
            r = _parse_number(row["outcome"], "outcome", line)
            if d is None or r is None:
                raise ValidationError(f"row {line}: exposure and outcome must be present")
        x = tuple(_parse_number(row[c], c, line) for c in covariate_names)
        subjects.append(Subject(sid, int(z_text), d, r, x))
    return Cohort(tuple(subjects), tuple(covariate_names), blind=blind)


def load_cohort(path: str | Path, *, blind: bool = False) -> Cohort:
    """Read and validate a cohort file.  ``blind`` drops the outcome at read time."""
    exclude = ("outcome", "exposure") if blind else ()
    _, rows = read_rows(path, exclude=exclude)
    return validate_cohort(rows, blind=blind)


@dataclass(frozen=True)
class Stratum:
    """A matched set: member ids and the count ``m`` of instrument-1 members."""

    members: tuple[str, ...]
    m: int

    @property
    def n(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class FullMatch:
    """A partition of a cohort into strata."""

    strata: tuple[Stratum, ...]

    def __post_init__(self):
        object.__setattr__(self, "strata", tuple(self.strata))

    def __len__(self) -> int:
        return len(self.strata)

    @classmethod
    def from_labels(cls, cohort: Cohort, labels) -> "FullMatch":
        """Build strata from one integer label per subject (cohort order).

        Strata are numbered by first appearance, so the result does not depend
        on the label values themselves.
        """
        labels = np.asarray(labels)
        groups: dict[int, list[int]] = {}
        for i, lab in enumerate(labels.tolist()):
            groups.setdefault(lab, []).append(i)
        z = cohort.instrument
        ids = cohort.ids
        strata = []
        for members in groups.values():
            strata.append(Stratum(tuple(ids[i] for i in members), int(z[members].sum())))
        return cls(tuple(strata))

    def labels(self, cohort: Cohort) -> np.ndarray:
        """Stratum index per subject in cohort order (``-1`` if unmatched)."""
        out = np.full(len(cohort), -1, dtype=np.int64)
        index = cohort.index
        for k, st in enumerate(self.strata):
            for sid in st.members:
                out[index[sid]] = k
        return out


@dataclass(frozen=True)
class MatchDiagnostics:
    histogram: dict[int, int]
    n_strata: int
    pairs: int
    one_treated: int
    one_control: int
    n_subjects: int = field(default=0)


def validate_full_match(match: FullMatch, cohort: Cohort) -> MatchDiagnostics:
    """Check that ``match`` is a full match of ``cohort``.

    Raises:
        ValidationError: when a subject is unknown, repeated or omitted, when a
            stratum's recorded ``m`` disagrees with the cohort, or when a stratum
            is not of 1:k or k:1 shape.
    """
    index = cohort.index
    z = cohort.instrument
    seen: set[str] = set()
    for k, st in enumerate(match.strata):
        for sid in st.members:
            if sid not in index:
                raise ValidationError(f"stratum {k}: unknown subject {sid!r}")
            if sid in seen:
                raise ValidationError(f"subject {sid!r} appears in more than one stratum")
            seen.add(sid)
        m = int(sum(z[index[sid]] for sid in st.members))
        if m != st.m:
            raise ValidationError(f"stratum {k}: recorded m={st.m} but members give m={m}")
        n = st.n
        if n < 2 or not (1 <= m <= n - 1) or min(m, n - m) != 1:
            raise ValidationError(f"stratum {k}: shape (m={m}, n={n}) is not 1:k or k:1")
    if len(seen) != len(cohort):
        missing = [sid for sid in cohort.ids if sid not in seen]
        raise ValidationError(f"{len(missing)} subjects are not in any stratum, e.g. {missing[0]!r}")
    return _diagnostics(match, len(cohort))


def _diagnostics(match: FullMatch, n_subjects: int) -> MatchDiagnostics:
    hist = Counter(st.n for st in match.strata)
    pairs = sum(1 for st in match.strata if st.n == 2)
    one_treated = sum(1 for st in match.strata if st.m == 1 and st.n > 2)
    one_control = sum(1 for st in match.strata if st.n - st.m == 1 and st.n > 2)
    return MatchDiagnostics(dict(sorted(hist.items())), len(match), pairs, one_treated, one_control, n_subjects)


def write_match(path: str | Path, match: FullMatch, cohort: Cohort, header: Sequence[str] = ()) -> None:
    """Write one ``id,stratum,instrument`` row per subject, in cohort order."""
    labels = match.labels(cohort)
    with open(path, "w", newline="") as fh:
        fh.write(format_match(match, cohort, header, labels))


def format_match(match: FullMatch, cohort: Cohort, header: Sequence[str] = (), labels=None) -> str:
    if labels is None:
        labels = match.labels(cohort)
    lines = [f"# {h}" for h in header]
    lines.append("id,stratum,instrument")
    for sid, lab, z in zip(cohort.ids, labels.tolist(), cohort.instrument.tolist()):
        lines.append(f"{sid},{lab + 1},{z}")
    return "\n".join(lines) + "\n"


def read_match(path: str | Path) -> tuple[FullMatch, dict[str, int]]:
    """Read a match file.

    Returns:
        The match and the instrument value recorded for each id, which callers
        use to detect a match file that no longer fits its cohort.
    """
    _, rows = read_rows(path)
    groups: dict[str, list[str]] = {}
    recorded: dict[str, int] = {}
    for row in rows:
        try:
            sid, lab, z = row["id"].strip(), row["stratum"].strip(), int(row["instrument"])
        except (KeyError, ValueError):
            raise ValidationError(f"{path}: expected columns id, stratum, instrument") from None
        groups.setdefault(lab, []).append(sid)
        recorded[sid] = z
    strata = tuple(Stratum(tuple(ids), sum(recorded[s] for s in ids)) for ids in groups.values())
    return FullMatch(strata), recorded


def check_match_consistency(match: FullMatch, recorded: Mapping[str, int], cohort: Cohort) -> None:
    """Raise when a match file does not belong to ``cohort``."""
    index = cohort.index
    if set(recorded) != set(index):
        raise ValidationError("stale match file: subject ids differ from the cohort")
    z = cohort.instrument
    for sid, value in recorded.items():
        if z[index[sid]] != value:
            raise ValidationError(f"stale match file: instrument of {sid!r} differs from the cohort")
    validate_full_match(match, cohort)
