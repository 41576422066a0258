"""Patients, visits and code taxonomies: ingestion, validation, splitting.

Corpus format is JSONL, one patient per line:

    {"id": "p1", "visits": [{"t": 12.5, "codes": ["C001", "C007"]}, ...]}

Timestamps are fractional days. Consecutive visits with equal timestamps are
pushed apart by GAP_EPSILON_DAYS (one hour) so gaps are always positive;
sequences are strictly increasing after loading.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

GAP_EPSILON_DAYS = 1.0 / 24.0


class DataError(ValueError):
    """Malformed corpus content."""


@dataclass(frozen=True)
class CodeTaxonomy:
    """Ordered code identifiers; order is lexicographic and fixes indexing."""

    codes: tuple
    groups: dict | None = None
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.codes)) != len(self.codes):
            raise DataError("taxonomy codes must be unique")
        if self.groups is not None:
            missing = [c for c in self.codes if c not in self.groups]
            if missing:
                raise DataError(f"group map misses {len(missing)} codes, "
                                f"e.g. {missing[0]!r}")
        object.__setattr__(self, "index", {c: i for i, c in enumerate(self.codes)})

    def __len__(self):
        return len(self.codes)


@dataclass(frozen=True)
class Visit:
    """One visit: timestamp in days and a non-empty set of code indices."""

    t: float
    codes: tuple  # sorted unique taxonomy indices

    def multi_hot(self, n_codes):
        x = np.zeros(n_codes, dtype=np.float64)
        x[list(self.codes)] = 1.0
        return x


@dataclass(frozen=True)
class Patient:
    id: str
    visits: tuple

    def __len__(self):
        return len(self.visits)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    validation: tuple
    test: tuple


def log_gap(t_prev, t_cur):
    """Natural log of the inter-visit gap, clamped below at one hour."""
    if t_cur < t_prev:
        raise DataError(f"gap is negative: {t_cur} < {t_prev}")
    return math.log(max(t_cur - t_prev, GAP_EPSILON_DAYS))


def codes_to_multi_hot(codes, n_codes):
    x = np.zeros(n_codes, dtype=np.float64)
    x[list(codes)] = 1.0
    return x


def _build_visit(raw, taxonomy, where):
    try:
        t = float(raw["t"])
        code_ids = raw["codes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: visit must have numeric 't' and 'codes'") from exc
    if t < 0:
        raise DataError(f"{where}: negative timestamp {t}")
    if not code_ids:
        raise DataError(f"{where}: empty code set")
    idx = set()
    for c in code_ids:
        if c not in taxonomy.index:
            raise DataError(f"{where}: code {c!r} not in taxonomy")
        idx.add(taxonomy.index[c])
    return Visit(t=t, codes=tuple(sorted(idx)))


def _strictify(visits):
    """Sort by timestamp, then push equal stamps apart by one hour."""
    visits = sorted(visits, key=lambda v: v.t)
    out = []
    prev = None
    for v in visits:
        t = v.t
        if prev is not None and t <= prev:
            t = prev + GAP_EPSILON_DAYS
        out.append(Visit(t=t, codes=v.codes))
        prev = t
    return tuple(out)


def load_jsonl(path, taxonomy_path=None, group_csv=None):
    """Load a patient corpus; returns (CodeTaxonomy, list of Patient).

    The taxonomy is the lexicographically sorted union of observed codes,
    unless an explicit taxonomy file (one code per line) is given, in which
    case unknown codes in the data are an error.
    """
    with open(path) as fh:
        lines = fh.readlines()

    raw_patients = []
    observed = set()
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict) or "id" not in rec or "visits" not in rec:
            raise DataError(f"line {lineno}: expected object with 'id' and 'visits'")
        if not rec["visits"]:
            raise DataError(f"line {lineno}: patient has no visits")
        raw_patients.append((lineno, rec))
        for visit in rec["visits"]:
            codes = visit.get("codes") if isinstance(visit, dict) else None
            if codes:
                observed.update(str(c) for c in codes)

    groups = load_group_csv(group_csv) if group_csv else None
    if taxonomy_path:
        taxonomy = load_taxonomy(taxonomy_path, groups)
    else:
        taxonomy = CodeTaxonomy(codes=tuple(sorted(observed)), groups=groups)

    patients = []
    for lineno, rec in raw_patients:
        visits = [_build_visit(v, taxonomy, f"line {lineno}") for v in rec["visits"]]
        patients.append(Patient(id=str(rec["id"]), visits=_strictify(visits)))
    return taxonomy, patients


def load_taxonomy(path, groups=None):
    with open(path) as fh:
        codes = [line.strip() for line in fh if line.strip()]
    return CodeTaxonomy(codes=tuple(sorted(codes)), groups=groups)


def load_group_csv(path):
    groups = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DataError(f"group map line {lineno}: expected 'code,group'")
            groups[parts[0].strip()] = parts[1].strip()
    return groups


def save_jsonl(taxonomy, patients, path):
    """Write patients in canonical form (sorted visits, sorted codes)."""
    with open(path, "w") as fh:
        for p in patients:
            rec = {
                "id": p.id,
                "visits": [
                    {"t": v.t, "codes": [taxonomy.codes[i] for i in v.codes]}
                    for v in p.visits
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def split_patients(patients, seed):
    """Shuffle by seed and split floor(0.8P) / floor(0.05P) / remainder.

    Single-visit patients are removed first; they carry no predictable
    transition.
    """
    retained = [p for p in patients if len(p) >= 2]
    n = len(retained)
    if n < 20:
        raise DataError(f"need at least 20 multi-visit patients, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [retained[i] for i in order]
    n_train = (8 * n) // 10   # floor(0.8 P), exact in integers
    n_val = n // 20           # floor(0.05 P)
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        validation=tuple(shuffled[n_train:n_train + n_val]),
        test=tuple(shuffled[n_train + n_val:]),
    )
