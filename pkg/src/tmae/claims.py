"""Claims data schema: records, validation/cleaning, vocabulary, visit encoding.

The on-disk format is JSONL, one patient per line:

    {"patient_id": str, "age": int, "gender": "F"|"M",
     "visits": [{"date": int, "type": "IP"|"OP"|"RX",
                 "diag": [str], "proc": [str], "drug": [str], "cost": float}]}

Cleaning rules applied on load: negative costs clamp to zero, visits with a
missing date are dropped, and surviving visits are sorted by date (stable,
so same-day visits keep their input order). Dates outside [0, 365] and
visits with no codes are validation errors, not cleanable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence, Union

import numpy as np


class Modality(str, Enum):
    DIAG = "DIAG"
    PROC = "PROC"
    DRUG = "DRUG"


CLAIM_TYPES = ("IP", "OP", "RX")
UTIL_INDEX = {"IP": 0, "OP": 1, "RX": 2}
GENDERS = ("F", "M")
GENDER_INDEX = {"F": 0, "M": 1}

CategoryMap = dict[tuple[Modality, str], str]


class ParseError(ValueError):
    """A line of a claims file is not well-formed JSON."""


class ValidationError(ValueError):
    """A record violates the claims schema; carries patient id and field."""

    def __init__(self, message: str, patient_id: str | None = None,
                 field_name: str | None = None) -> None:
        self.patient_id = patient_id
        self.field_name = field_name
        prefix = ""
        if patient_id is not None:
            prefix += f"patient {patient_id!r}: "
        if field_name is not None:
            prefix += f"field {field_name!r}: "
        super().__init__(prefix + message)


class UnknownCodeError(KeyError):
    def __init__(self, code: str, modality: Modality) -> None:
        self.code = code
        self.modality = modality
        super().__init__(f"unknown {modality.value} code {code!r}")


@dataclass(frozen=True)
class MedicalCode:
    """One opaque code string tagged with its modality."""

    text: str
    modality: Modality

    def __post_init__(self) -> None:
        if not self.text:
            raise ValidationError("empty code text")
        if not isinstance(self.modality, Modality):
            object.__setattr__(self, "modality", Modality(self.modality))


@dataclass(frozen=True)
class Demographics:
    age_years: int
    gender: str

    def __post_init__(self) -> None:
        if not isinstance(self.age_years, int) or isinstance(self.age_years, bool) \
                or not 0 <= self.age_years <= 120:
            raise ValidationError(f"age must be an integer in [0, 120], got {self.age_years!r}",
                                  field_name="age")
        if self.gender not in GENDERS:
            raise ValidationError(f"gender must be 'F' or 'M', got {self.gender!r}",
                                  field_name="gender")


def _normalize_codes(codes: Iterable[str], field_name: str) -> tuple[str, ...]:
    out = []
    for c in codes:
        if not isinstance(c, str) or not c:
            raise ValidationError(f"codes must be non-empty strings, got {c!r}",
                                  field_name=field_name)
        out.append(c)
    return tuple(sorted(set(out)))


@dataclass(frozen=True)
class Visit:
    """One claim line: day offset, claim type, code sets, paid dollars.

    Code fields are kept as sorted, de-duplicated tuples (set semantics
    with a deterministic iteration order).
    """

    date: int
    claim_type: str
    diag_codes: tuple[str, ...] = ()
    proc_codes: tuple[str, ...] = ()
    drug_codes: tuple[str, ...] = ()
    cost: float = 0.0

    def __post_init__(self) -> None:
        if not isinstance(self.date, int) or isinstance(self.date, bool) \
                or not 0 <= self.date <= 365:
            raise ValidationError(f"date must be an integer in [0, 365], got {self.date!r}",
                                  field_name="date")
        if self.claim_type not in CLAIM_TYPES:
            raise ValidationError(f"claim type must be one of {CLAIM_TYPES}, got "
                                  f"{self.claim_type!r}", field_name="type")
        for name in ("diag_codes", "proc_codes", "drug_codes"):
            object.__setattr__(self, name, _normalize_codes(getattr(self, name), name))
        cost = float(self.cost)
        if not np.isfinite(cost) or cost < 0:
            raise ValidationError(f"cost must be finite and >= 0, got {self.cost!r}",
                                  field_name="cost")
        object.__setattr__(self, "cost", cost)
        if not (self.diag_codes or self.proc_codes or self.drug_codes):
            raise ValidationError("visit has no codes in any modality", field_name="visits")
        if self.claim_type == "RX" and not self.drug_codes:
            raise ValidationError("RX visit without drug codes", field_name="drug")

    def codes(self, modality: Modality) -> tuple[str, ...]:
        return {Modality.DIAG: self.diag_codes,
                Modality.PROC: self.proc_codes,
                Modality.DRUG: self.drug_codes}[modality]


@dataclass(frozen=True)
class PatientRecord:
    """Demographics plus a date-ordered sequence of visits."""

    patient_id: str
    demographics: Demographics
    visits: tuple[Visit, ...]

    def __post_init__(self) -> None:
        if not self.patient_id or not isinstance(self.patient_id, str):
            raise ValidationError("empty patient_id", field_name="patient_id")
        object.__setattr__(self, "visits", tuple(self.visits))
        if not self.visits:
            raise ValidationError("patient has no visits", self.patient_id, "visits")
        dates = [v.date for v in self.visits]
        if any(a > b for a, b in zip(dates, dates[1:])):
            raise ValidationError("visits are not sorted by date", self.patient_id, "visits")


@dataclass(frozen=True)
class Rejection:
    """Why clean_record refused a raw record (a value, not an exception)."""

    patient_id: str | None
    reason: str
    field_name: str | None = None


def clean_record(raw: Mapping) -> Union[PatientRecord, Rejection]:
    """Validate and clean one raw patient object.

    Applies the cleaning rules (clamp negative costs, drop dateless visits,
    re-sort by date) and returns either a PatientRecord or a Rejection.
    Never raises on bad data; idempotent over its own serialized output.
    """
    if not isinstance(raw, Mapping):
        return Rejection(None, "record is not an object")
    pid = raw.get("patient_id")
    if not isinstance(pid, str) or not pid:
        return Rejection(None, "empty patient_id", "patient_id")

    def reject(reason: str, field_name: str | None = None) -> Rejection:
        return Rejection(pid, reason, field_name)

    age = raw.get("age")
    gender = raw.get("gender")
    try:
        demo = Demographics(age, gender)
    except ValidationError as e:
        return reject(str(e), e.field_name)

    raw_visits = raw.get("visits")
    if not isinstance(raw_visits, list):
        return reject("visits must be a list", "visits")
    cleaned: list[Visit] = []
    for rv in raw_visits:
        if not isinstance(rv, Mapping):
            return reject("visit is not an object", "visits")
        date = rv.get("date")
        if date is None:
            continue  # empty service date: drop the visit
        cost = rv.get("cost")
        if not isinstance(cost, (int, float)) or isinstance(cost, bool):
            return reject(f"cost must be a number, got {cost!r}", "cost")
        if isinstance(cost, float) and not np.isfinite(cost):
            return reject("cost must be finite", "cost")
        cost = max(0.0, float(cost))  # negative paid amounts become zero
        code_lists = {}
        for key in ("diag", "proc", "drug"):
            values = rv.get(key, [])
            if not isinstance(values, (list, tuple)):
                return reject(f"{key} must be a list of codes", key)
            code_lists[key] = tuple(values)
        try:
            cleaned.append(Visit(
                date=date,
                claim_type=rv.get("type"),
                diag_codes=code_lists["diag"],
                proc_codes=code_lists["proc"],
                drug_codes=code_lists["drug"],
                cost=cost,
            ))
        except (ValidationError, TypeError) as e:
            field_name = e.field_name if isinstance(e, ValidationError) else None
            return reject(str(e), field_name)
    if not cleaned:
        return reject("no dated visits", "visits")
    cleaned.sort(key=lambda v: v.date)  # stable: same-day visits keep input order
    try:
        return PatientRecord(pid, demo, tuple(cleaned))
    except ValidationError as e:
        return reject(str(e), e.field_name)


def record_to_obj(record: PatientRecord) -> dict:
    """Plain-dict form of a record, matching the JSONL schema."""
    return {
        "patient_id": record.patient_id,
        "age": record.demographics.age_years,
        "gender": record.demographics.gender,
        "visits": [
            {
                "date": v.date,
                "type": v.claim_type,
                "diag": list(v.diag_codes),
                "proc": list(v.proc_codes),
                "drug": list(v.drug_codes),
                "cost": v.cost,
            }
            for v in record.visits
        ],
    }


def load_claims(path) -> list[PatientRecord]:
    """Load, clean, and validate a claims JSONL file.

    Raises ParseError for malformed JSON (naming the line number) and
    ValidationError for schema violations (naming patient and field).
    """
    records: list[PatientRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"line {lineno}: invalid JSON: {e.msg}") from None
            result = clean_record(raw)
            if isinstance(result, Rejection):
                raise ValidationError(f"line {lineno}: {result.reason}",
                                      result.patient_id, result.field_name)
            if result.patient_id in seen:
                raise ValidationError(f"line {lineno}: duplicate patient_id",
                                      result.patient_id, "patient_id")
            seen.add(result.patient_id)
            records.append(result)
    return records


def write_claims(records: Sequence[PatientRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(record_to_obj(r), separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# category map


def load_category_map(path) -> CategoryMap:
    """Read `modality<TAB>code<TAB>category` triples."""
    out: CategoryMap = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"line {lineno}: expected 3 tab-separated fields")
            mod_text, code, category = parts
            try:
                modality = Modality(mod_text)
            except ValueError:
                raise ParseError(f"line {lineno}: unknown modality {mod_text!r}") from None
            if not code or not category:
                raise ParseError(f"line {lineno}: empty code or category")
            out[(modality, code)] = category
    return out


def write_category_map(category_map: CategoryMap, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for (modality, code), category in sorted(category_map.items(),
                                                 key=lambda kv: (kv[0][0].value, kv[0][1])):
            f.write(f"{modality.value}\t{code}\t{category}\n")


# ---------------------------------------------------------------------------
# vocabulary


@dataclass(frozen=True)
class CodeVocabulary:
    """Dense per-modality code indices plus the code-to-category map."""

    code_index: dict  # Modality -> {code: index}, first-appearance order
    category_index: dict  # {category: index}
    code_category: CategoryMap  # covers every indexed code

    def size(self, modality: Modality) -> int:
        return len(self.code_index[modality])

    @property
    def n_diag(self) -> int:
        return self.size(Modality.DIAG)

    @property
    def n_proc(self) -> int:
        return self.size(Modality.PROC)

    @property
    def n_drug(self) -> int:
        return self.size(Modality.DRUG)

    @property
    def n_categories(self) -> int:
        return len(self.category_index)

    @property
    def total_codes(self) -> int:
        return self.n_diag + self.n_proc + self.n_drug

    def index_of(self, modality: Modality, code: str) -> int:
        try:
            return self.code_index[modality][code]
        except KeyError:
            raise UnknownCodeError(code, modality) from None

    def category_index_of(self, modality: Modality, code: str) -> int:
        category = self.code_category.get((modality, code))
        if category is None:
            raise UnknownCodeError(code, modality)
        return self.category_index[category]

    def codes_in_order(self, modality: Modality) -> list[str]:
        return list(self.code_index[modality].keys())

    def fingerprint(self) -> str:
        """Stable hash of the full vocabulary contents."""
        payload = {
            "diag": self.codes_in_order(Modality.DIAG),
            "proc": self.codes_in_order(Modality.PROC),
            "drug": self.codes_in_order(Modality.DRUG),
            "categories": list(self.category_index.keys()),
            "map": sorted([m.value, c, cat] for (m, c), cat in self.code_category.items()),
        }
        blob = json.dumps(payload, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def build_vocabulary(records: Sequence[PatientRecord],
                     category_map: CategoryMap) -> CodeVocabulary:
    """Index every code in first-appearance order; categories likewise.

    Every code must be covered by the category map (a clinical grouper is
    total over real code systems; a gap is a data bug).
    """
    code_index: dict = {m: {} for m in Modality}
    category_index: dict = {}
    code_category: CategoryMap = {}
    for record in records:
        for visit in record.visits:
            for modality in Modality:
                for code in visit.codes(modality):
                    per_mod = code_index[modality]
                    if code in per_mod:
                        continue
                    category = category_map.get((modality, code))
                    if category is None:
                        raise ValidationError(
                            f"code {code!r} ({modality.value}) missing from category map",
                            record.patient_id, "category_map")
                    per_mod[code] = len(per_mod)
                    if category not in category_index:
                        category_index[category] = len(category_index)
                    code_category[(modality, code)] = category
    return CodeVocabulary(code_index, category_index, code_category)


# ---------------------------------------------------------------------------
# visit encoding


@dataclass(frozen=True)
class EncodedVisit:
    """Index-space view of one visit: sorted per-modality code indices."""

    diag_idx: tuple[int, ...]
    proc_idx: tuple[int, ...]
    drug_idx: tuple[int, ...]
    util_index: int
    date: int
    cost: float


def encode_visit(visit: Visit, vocab: CodeVocabulary) -> EncodedVisit:
    """Map a visit's codes to vocabulary indices (sorted, deduplicated)."""
    return EncodedVisit(
        diag_idx=tuple(sorted(vocab.index_of(Modality.DIAG, c) for c in visit.diag_codes)),
        proc_idx=tuple(sorted(vocab.index_of(Modality.PROC, c) for c in visit.proc_codes)),
        drug_idx=tuple(sorted(vocab.index_of(Modality.DRUG, c) for c in visit.drug_codes)),
        util_index=UTIL_INDEX[visit.claim_type],
        date=visit.date,
        cost=visit.cost,
    )


def multi_hot(encoded: EncodedVisit, vocab: CodeVocabulary) -> np.ndarray:
    """Binary target vector over the concatenated vocabularies.

    Layout: diagnosis block, then procedure, then drug.
    """
    out = np.zeros(vocab.total_codes, dtype=np.float64)
    out[list(encoded.diag_idx)] = 1.0
    offset = vocab.n_diag
    out[[offset + i for i in encoded.proc_idx]] = 1.0
    offset += vocab.n_proc
    out[[offset + i for i in encoded.drug_idx]] = 1.0
    return out
