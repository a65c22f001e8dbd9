"""Patient records -> preprocessed visits -> encoded token sequences.

Also home to the synthetic cohort generator (planted temporal motifs with a
known decision rule) and the stratified k-fold splitter.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import EMPTY_VISIT_ID, N_RESERVED, PAD_ID, UNK_ID

log = logging.getLogger(__name__)

SOURCES = ("ICD10", "DBID", "LOINC", "ER")
RESERVED_TOKENS = ("[PAD]", "[EMPTY_VISIT]", "[UNK]")
EMPTY_VISIT = RESERVED_TOKENS[EMPTY_VISIT_ID]
MERGE_DAYS = 7
WINDOW_DAYS = 457  # 15 months x 30.44 days
MIN_VISITS = 3
MAX_SEQ_LEN = 256


class InputError(ValueError):
    """Malformed record or file."""


class ConfigError(ValueError):
    """Infeasible or invalid configuration."""


# --------------------------------------------------------------------------
# records


@dataclass
class Event:
    code: str
    source: str
    flag: str | None = None  # LOINC abnormal direction: "H", "L" (anything else is dropped)
    count: int = 1  # ER visits represented by this event

    def to_json(self) -> dict:
        d = {"code": self.code, "source": self.source}
        if self.flag is not None:
            d["flag"] = self.flag
        if self.count != 1:
            d["count"] = self.count
        return d


@dataclass
class Visit:
    date: date
    events: list[Event] = field(default_factory=list)


@dataclass
class PatientRecord:
    patient_id: str
    label: int
    index_date: date
    visits: list[Visit]

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "label": self.label,
            "index_date": self.index_date.isoformat(),
            "visits": [{"date": v.date.isoformat(), "events": [e.to_json() for e in v.events]} for v in self.visits],
        }

    @classmethod
    def from_json(cls, d: dict) -> "PatientRecord":
        try:
            label = int(d["label"])
            if label not in (0, 1):
                raise InputError(f"label must be 0 or 1, got {d['label']!r}")
            index_date = date.fromisoformat(d["index_date"])
            visits = []
            for v in d["visits"]:
                events = []
                for e in v.get("events", []):
                    if e["source"] not in SOURCES:
                        raise InputError(f"unknown event source {e['source']!r}")
                    events.append(Event(str(e["code"]), e["source"], e.get("flag"), int(e.get("count", 1))))
                visits.append(Visit(date.fromisoformat(v["date"]), events))
        except (KeyError, TypeError, ValueError) as err:
            if isinstance(err, InputError):
                raise
            raise InputError(f"bad record field: {err}") from err
        rec = cls(str(d["patient_id"]), label, index_date, visits)
        for v in rec.visits:
            if v.date > rec.index_date:
                raise InputError(f"patient {rec.patient_id}: visit {v.date} after index date {rec.index_date}")
        return rec


def read_patients(path: str | Path) -> list[PatientRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(PatientRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, InputError) as err:
                raise InputError(f"{path}:{lineno}: {err}") from err
    return records


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


# --------------------------------------------------------------------------
# preprocessing rules


def merge_visits(visits: Sequence[Visit], merge_days: int = MERGE_DAYS) -> list[Visit]:
    """Greedy anchor merge: a visit joins the open episode if it lies within
    ``merge_days`` of the episode's first date. The episode keeps that first
    date; duplicate events are dropped and ER counts are summed."""
    episodes: list[Visit] = []
    for v in sorted(visits, key=lambda v: v.date):
        if episodes and (v.date - episodes[-1].date).days <= merge_days:
            ep = episodes[-1]
        else:
            ep = Visit(v.date, [])
            episodes.append(ep)
        for e in v.events:
            if e.source == "ER":
                er = next((x for x in ep.events if x.source == "ER"), None)
                if er is None:
                    ep.events.append(Event(e.code, "ER", None, e.count))
                else:
                    er.count += e.count
            elif not any(x.source == e.source and x.code == e.code and x.flag == e.flag for x in ep.events):
                ep.events.append(Event(e.code, e.source, e.flag, e.count))
    return episodes


def truncate_icd(code: str, warnings: Counter | None = None) -> str:
    """ICD10 code -> three-character root category, uppercased."""
    code = code.strip().upper()
    if len(code) < 3:
        if warnings is not None:
            warnings["short_icd_code"] += 1
        return code
    return code[:3]


def er_token(count: int) -> str:
    return "ER:ER_1" if count <= 1 else "ER:ER_2" if count == 2 else "ER:ER_3PLUS"


def visit_tokens(visit: Visit, warnings: Counter | None = None) -> list[str]:
    """Tokens for one (merged) visit in event order, deduplicated.

    Labs without an H/L abnormal flag are dropped.
    """
    out: list[str] = []
    er_count = 0
    for e in visit.events:
        if e.source == "ICD10":
            tok = "ICD10:" + truncate_icd(e.code, warnings)
        elif e.source == "DBID":
            tok = "DBID:" + e.code.strip()
        elif e.source == "LOINC":
            flag = (e.flag or "").upper()
            if flag not in ("H", "L"):
                continue
            tok = f"LOINC:{e.code.strip()}_{flag}"
        elif e.source == "ER":
            er_count += e.count
            continue
        else:
            raise InputError(f"unknown event source {e.source!r}")
        if tok not in out:
            out.append(tok)
    if er_count > 0:
        out.append(er_token(er_count))
    return out


@dataclass
class TokenizedRecord:
    patient_id: str
    label: int
    index_date: date
    visits: list[tuple[date, list[str]]]  # chronological; empty visits carry [EMPTY_VISIT]


@dataclass
class Rejection:
    patient_id: str
    reason: str


def window_and_filter(
    record: PatientRecord,
    window_days: int = WINDOW_DAYS,
    min_visits: int = MIN_VISITS,
    merge_days: int = MERGE_DAYS,
    warnings: Counter | None = None,
) -> TokenizedRecord | Rejection:
    """Merge, keep visits within ``window_days`` of the index date, tokenize,
    and reject patients left with fewer than ``min_visits`` visits."""
    merged = merge_visits(record.visits, merge_days)
    kept = [v for v in merged if (record.index_date - v.date).days <= window_days]
    if len(kept) < min_visits:
        return Rejection(record.patient_id, "too_few_visits")
    visits = []
    for v in kept:
        toks = visit_tokens(v, warnings)
        visits.append((v.date, toks or [EMPTY_VISIT]))
    return TokenizedRecord(record.patient_id, record.label, record.index_date, visits)


# --------------------------------------------------------------------------
# vocabulary and encoding


def token_source(token: str) -> str:
    if token in RESERVED_TOKENS:
        return "SPECIAL"
    return token.split(":", 1)[0]


class Vocabulary:
    def __init__(self, tokens: Sequence[str] = (), freq: dict[str, int] | None = None):
        self.id_to_token = list(RESERVED_TOKENS) + [t for t in tokens if t not in RESERVED_TOKENS]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        self.freq = dict(freq or {})

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    def source(self, token: str) -> str:
        return token_source(token)

    @classmethod
    def build(cls, records: Iterable[TokenizedRecord]) -> "Vocabulary":
        freq: Counter = Counter()
        for r in records:
            for _, toks in r.visits:
                freq.update(toks)
        tokens = sorted(t for t in freq if t not in RESERVED_TOKENS)
        return cls(tokens, {t: freq[t] for t in freq})

    def to_json(self) -> dict:
        return {t: {"id": i, "source": token_source(t), "freq": int(self.freq.get(t, 0))} for i, t in enumerate(self.id_to_token)}

    @classmethod
    def from_json(cls, d: dict) -> "Vocabulary":
        ordered = sorted(d.items(), key=lambda kv: kv[1]["id"])
        if [v["id"] for _, v in ordered] != list(range(len(ordered))):
            raise InputError("vocabulary ids must be dense from 0")
        if tuple(t for t, _ in ordered[:N_RESERVED]) != RESERVED_TOKENS:
            raise InputError("vocabulary must start with the reserved tokens")
        return cls([t for t, _ in ordered[N_RESERVED:]], {t: v.get("freq", 0) for t, v in ordered})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class EncodedInstance:
    patient_id: str
    label: int
    token_ids: np.ndarray
    visit_idx: np.ndarray
    days_ago: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.visit_idx = np.asarray(self.visit_idx, dtype=np.int64)
        self.days_ago = np.asarray(self.days_ago, dtype=np.int64)
        if not len(self.token_ids) == len(self.visit_idx) == len(self.days_ago):
            raise InputError(f"{self.patient_id}: sequence lengths differ")

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def n_visits(self) -> int:
        return int(self.visit_idx.max()) + 1 if len(self.visit_idx) else 0

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "label": int(self.label),
            "token_ids": self.token_ids.tolist(),
            "visit_idx": self.visit_idx.tolist(),
            "days_ago": self.days_ago.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "EncodedInstance":
        return cls(str(d["patient_id"]), int(d["label"]), d["token_ids"], d["visit_idx"], d["days_ago"])


def encode(
    record: TokenizedRecord,
    vocab: Vocabulary,
    max_seq_len: int = MAX_SEQ_LEN,
    min_visits: int = MIN_VISITS,
) -> EncodedInstance | Rejection:
    """Flatten visits into token ids with visit-order and days-ago indices.

    Overlong records lose their oldest whole visits until they fit.
    """
    visits = list(record.visits)
    total = sum(len(t) for _, t in visits)
    while visits and total > max_seq_len:
        total -= len(visits[0][1])
        visits.pop(0)
    if len(visits) < min_visits:
        return Rejection(record.patient_id, "too_few_visits_after_truncation")
    last = visits[-1][0]
    ids, vis, days = [], [], []
    for v, (d, toks) in enumerate(visits):
        gap = (last - d).days
        for t in toks:
            ids.append(vocab.id(t))
            vis.append(v)
            days.append(gap)
    return EncodedInstance(record.patient_id, record.label, ids, vis, days)


def decode(instance: EncodedInstance, vocab: Vocabulary) -> list[tuple[int, int, list[str]]]:
    """(visit_idx, days_ago, tokens) per visit; inverse of :func:`encode` up to vocabulary misses."""
    out: list[tuple[int, int, list[str]]] = []
    for tid, v, d in zip(instance.token_ids, instance.visit_idx, instance.days_ago):
        if not out or out[-1][0] != v:
            out.append((int(v), int(d), []))
        out[-1][2].append(vocab.token(int(tid)))
    return out


def read_encoded(path: str | Path) -> list[EncodedInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(EncodedInstance.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise InputError(f"{path}:{lineno}: {err}") from err
    return out


@dataclass
class PreprocessReport:
    n_input: int = 0
    n_encoded: int = 0
    rejections: Counter = field(default_factory=Counter)
    warnings: Counter = field(default_factory=Counter)

    def to_json(self) -> dict:
        return {
            "n_input": self.n_input,
            "n_encoded": self.n_encoded,
            "n_rejected": int(sum(self.rejections.values())),
            "rejected_by_reason": dict(sorted(self.rejections.items())),
            "warnings": dict(sorted(self.warnings.items())),
        }


def preprocess(
    records: Sequence[PatientRecord],
    *,
    window_days: int = WINDOW_DAYS,
    min_visits: int = MIN_VISITS,
    merge_days: int = MERGE_DAYS,
    max_seq_len: int = MAX_SEQ_LEN,
    vocab: Vocabulary | None = None,
) -> tuple[list[EncodedInstance], Vocabulary, PreprocessReport]:
    """Full pipeline over a cohort. Builds the vocabulary unless one is given."""
    report = PreprocessReport(n_input=len(records))
    tokenized = []
    for r in records:
        out = window_and_filter(r, window_days, min_visits, merge_days, report.warnings)
        if isinstance(out, Rejection):
            report.rejections[out.reason] += 1
        else:
            tokenized.append(out)
    if vocab is None:
        vocab = Vocabulary.build(tokenized)
    encoded = []
    for t in tokenized:
        out = encode(t, vocab, max_seq_len, min_visits)
        if isinstance(out, Rejection):
            report.rejections[out.reason] += 1
        else:
            encoded.append(out)
    report.n_encoded = len(encoded)
    return encoded, vocab, report


def restrict_to_vocab(instances: Sequence[EncodedInstance], known_ids: set[int]) -> list[EncodedInstance]:
    """Map token ids outside ``known_ids`` to UNK (reserved ids always survive)."""
    out = []
    for x in instances:
        ids = np.array([t if (t < N_RESERVED or t in known_ids) else UNK_ID for t in x.token_ids.tolist()], dtype=np.int64)
        out.append(EncodedInstance(x.patient_id, x.label, ids, x.visit_idx, x.days_ago))
    return out


def train_token_ids(instances: Sequence[EncodedInstance]) -> set[int]:
    seen: set[int] = set()
    for x in instances:
        seen.update(x.token_ids.tolist())
    return seen


# --------------------------------------------------------------------------
# synthetic cohorts


@dataclass
class GeneratorSpec:
    n_patients: int = 2000
    positive_rate: float = 0.21
    vocab_sizes: dict = field(default_factory=lambda: {"ICD10": 80, "DBID": 60, "LOINC": 40})
    source_weights: dict = field(default_factory=lambda: {"ICD10": 0.658, "DBID": 0.221, "LOINC": 0.112})
    risk_codes: tuple = (("ICD10", "K58.9"), ("DBID", "DB00813"))
    max_gap_days: int = 30
    protective_code: tuple = ("DBID", "DB01183")
    protective_rate_case: float = 0.08
    protective_rate_control: float = 0.35
    order_codes: tuple = (("LOINC", "1975-2", "H"), ("LOINC", "2345-7", "L"))
    order_rate: float = 0.35
    motif_noise: float = 0.0
    tokens_per_visit: float = 2.5
    er_rate: float = 0.08
    empty_visit_rate: float = 0.03
    normal_lab_rate: float = 0.3
    split_visit_rate: float = 0.1
    min_visits: int = 4
    max_visits: int = 8
    min_gap_days: int = 8
    max_gap_days_noise: int = 40
    window_days: int = WINDOW_DAYS
    first_index_date: str = "2018-01-01"
    index_date_span_days: int = 1800
    seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if not 0.0 < self.positive_rate < 1.0:
            raise ConfigError("positive_rate must lie in (0, 1)")
        if self.max_gap_days < 1:
            raise ConfigError("max_gap_days must be >= 1")
        if self.min_gap_days <= MERGE_DAYS:
            raise ConfigError(f"min_gap_days must exceed the {MERGE_DAYS}-day merge window")
        if self.max_gap_days < self.min_gap_days:
            raise ConfigError("max_gap_days must be >= min_gap_days (close-gap visits would merge)")
        if not 3 <= self.min_visits <= self.max_visits:
            raise ConfigError("need 3 <= min_visits <= max_visits")
        if self.max_gap_days_noise < self.min_gap_days:
            raise ConfigError("max_gap_days_noise must be >= min_gap_days")
        for name in ("protective_rate_case", "protective_rate_control", "order_rate", "motif_noise",
                     "er_rate", "empty_visit_rate", "normal_lab_rate", "split_visit_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for src, n in self.vocab_sizes.items():
            if src not in ("ICD10", "DBID", "LOINC") or n < 1:
                raise ConfigError(f"bad vocab size entry {src}: {n}")
        # worst-case layout: last-visit offset, two visits after the motif triple (up to three),
        # its close and far gaps, and the remaining minimum visits
        third = self.window_days // 3
        after = 14 + 3 * self.max_gap_days_noise
        if after > third:
            raise ConfigError(f"window of {self.window_days} days leaves no room for recent visits (last third = {third} days)")
        far = after + self.max_gap_days + self.control_gap_range[1] + max(self.min_visits - 3, 0) * self.min_gap_days
        if far > self.window_days:
            raise ConfigError(f"window of {self.window_days} days is too short for {self.min_visits} visits with a {self.control_gap_range[1]}-day motif gap")

    @property
    def control_gap_range(self) -> tuple[int, int]:
        lo = 3 * self.max_gap_days + 1
        return lo, lo + 60

    @classmethod
    def from_json(cls, d: dict) -> "GeneratorSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("risk_codes", "order_codes"):
            if key in d:
                d[key] = tuple(tuple(c) for c in d[key])
        if "protective_code" in d:
            d["protective_code"] = tuple(d["protective_code"])
        try:
            return cls(**d)
        except TypeError as err:
            raise ConfigError(str(err)) from err


def _code_token(src_code) -> str:
    src, code = src_code[0], src_code[1]
    flag = src_code[2] if len(src_code) > 2 else None
    return visit_tokens(Visit(date.min, [Event(code, src, flag)]))[0]


def planted_tokens(spec: GeneratorSpec) -> dict:
    return {
        "risk": [_code_token(c) for c in spec.risk_codes],
        "protective": _code_token(spec.protective_code),
        "order": [_code_token(c) for c in spec.order_codes],
    }


def _noise_codebook(spec: GeneratorSpec, rng: np.random.Generator) -> dict[str, list[tuple]]:
    reserved = {_code_token(c) for c in (*spec.risk_codes, spec.protective_code, *spec.order_codes)}
    book: dict[str, list[tuple]] = {}
    letters = "ABCDEGHIJKLMNR"
    n = spec.vocab_sizes.get("ICD10", 0)
    roots = [f"{letters[i % len(letters)]}{(i * 7) % 100:02d}" for i in range(4 * n)]
    roots = [r for r in dict.fromkeys(roots) if f"ICD10:{r}" not in reserved][:n]
    book["ICD10"] = [("ICD10", r) for r in roots]
    n = spec.vocab_sizes.get("DBID", 0)
    book["DBID"] = [("DBID", f"DB{10000 + 37 * i:05d}") for i in range(n + 5)
                    if f"DBID:DB{10000 + 37 * i:05d}" not in reserved][:n]
    n = spec.vocab_sizes.get("LOINC", 0)
    book["LOINC"] = [("LOINC", f"{3000 + 11 * i}-{i % 10}") for i in range(n)]
    return book


def _noise_event(book, spec, rng) -> Event:
    srcs = [s for s in ("ICD10", "DBID", "LOINC") if book.get(s)]
    w = np.array([spec.source_weights.get(s, 0.0) for s in srcs], dtype=float)
    src = srcs[rng.choice(len(srcs), p=w / w.sum())]
    codes = book[src]
    # Zipf-like popularity so token frequencies vary
    ranks = np.arange(1, len(codes) + 1, dtype=float)
    p = 1.0 / ranks
    _, code = codes[rng.choice(len(codes), p=p / p.sum())]
    if src == "ICD10":
        if rng.random() < 0.7:
            code = f"{code}.{rng.integers(0, 10)}"
        return Event(code, src)
    if src == "LOINC":
        flag = "N" if rng.random() < spec.normal_lab_rate else ("H" if rng.random() < 0.5 else "L")
        return Event(code, src, flag)
    return Event(code, src)


def _ev(code_tuple) -> Event:
    return Event(code_tuple[1], code_tuple[0], code_tuple[2] if len(code_tuple) > 2 else None)


def _one_patient(pid: str, spec: GeneratorSpec, rng: np.random.Generator, book) -> tuple[PatientRecord, dict]:
    label = int(rng.random() < spec.positive_rate)
    flipped = bool(rng.random() < spec.motif_noise)
    case_motif = bool(label) != flipped
    n_v = int(rng.integers(spec.min_visits, spec.max_visits + 1))
    lo, hi = spec.min_gap_days, spec.max_gap_days_noise

    # offsets are days before the index date, built from the most recent visit backwards
    offsets = [int(rng.integers(0, 15))]
    n_after = int(rng.integers(0, min(3, n_v - 3) + 1))
    for _ in range(n_after):
        offsets.append(offsets[-1] + int(rng.integers(lo, hi + 1)))
    # every patient gets the same visit triple: close gap (recent) then far gap (older);
    # the label only decides which pair of the triple carries the risk codes
    newest = len(offsets) - 1
    close_gap = int(rng.integers(spec.min_gap_days, spec.max_gap_days + 1))
    far_gap = int(rng.integers(*spec.control_gap_range))
    offsets.append(offsets[-1] + close_gap)
    offsets.append(offsets[-1] + far_gap)
    if case_motif:
        r2_pos, r1_pos, gap = newest, newest + 1, close_gap
    else:
        r2_pos, r1_pos, gap = newest + 1, newest + 2, far_gap
    while len(offsets) < n_v:
        nxt = offsets[-1] + int(rng.integers(lo, hi + 1))
        if nxt > spec.window_days:
            break
        offsets.append(nxt)

    n = len(offsets)
    events: list[list[Event]] = [[] for _ in range(n)]
    motif_visits = {r1_pos, r2_pos}
    for i in range(n):
        if i not in motif_visits and rng.random() < spec.empty_visit_rate:
            if rng.random() < 0.5:
                events[i].append(Event(book["LOINC"][0][1], "LOINC", "N"))
            continue
        k = max(1, int(rng.poisson(spec.tokens_per_visit)))
        events[i].extend(_noise_event(book, spec, rng) for _ in range(k))
        if rng.random() < spec.er_rate:
            events[i].append(Event("ER", "ER", None, int(rng.integers(1, 4))))
    events[r1_pos].append(_ev(spec.risk_codes[0]))
    events[r2_pos].append(_ev(spec.risk_codes[1]))

    has_order = bool(rng.random() < spec.order_rate)
    if has_order:
        i, j = sorted(rng.choice(n, size=2, replace=False).tolist(), reverse=True)  # i older than j
        first, second = (spec.order_codes[0], spec.order_codes[1]) if case_motif else (spec.order_codes[1], spec.order_codes[0])
        events[i].append(_ev(first))
        events[j].append(_ev(second))
    p_rate = spec.protective_rate_case if label else spec.protective_rate_control
    has_protective = bool(rng.random() < p_rate)
    if has_protective:
        events[int(rng.integers(0, n))].append(_ev(spec.protective_code))

    start = date.fromisoformat(spec.first_index_date)
    index_date = start + timedelta(days=int(rng.integers(0, spec.index_date_span_days)))
    visits = []
    for i in range(n - 1, -1, -1):
        d = index_date - timedelta(days=offsets[i])
        evs = events[i]
        if len(evs) > 1 and rng.random() < spec.split_visit_rate:
            # same episode recorded as two encounters a few days apart
            cut = int(rng.integers(1, len(evs)))
            later = d + timedelta(days=int(rng.integers(1, MERGE_DAYS)))
            if later <= index_date and (i == 0 or (later - d).days < offsets[i] - offsets[i - 1]):
                visits.append(Visit(d, evs[:cut]))
                visits.append(Visit(later, evs[cut:]))
                continue
        visits.append(Visit(d, evs))
    truth = {"patient_id": pid, "label": label, "case_motif": case_motif, "flipped": flipped,
             "motif_gap_days": gap, "order_motif": has_order, "protective": has_protective}
    return PatientRecord(pid, label, index_date, visits), truth


def generate(spec: GeneratorSpec) -> tuple[list[PatientRecord], dict]:
    """Synthetic cohort plus a manifest describing what was planted."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    book = _noise_codebook(spec, rng)
    records, truths = [], []
    for i in range(spec.n_patients):
        rec, truth = _one_patient(f"P{i + 1:06d}", spec, rng, book)
        records.append(rec)
        truths.append(truth)
    planted = planted_tokens(spec)
    manifest = {
        "seed": spec.seed,
        "spec": asdict(spec),
        "planted": planted,
        "max_gap_days": spec.max_gap_days,
        "control_gap_days": list(spec.control_gap_range),
        "optimal_rule": (
            f"predict case iff a visit containing {planted['risk'][0]} and a visit containing "
            f"{planted['risk'][1]} are at most {spec.max_gap_days} days apart"
        ),
        "n_patients": len(records),
        "n_cases": int(sum(r.label for r in records)),
        "n_motif_flipped": int(sum(t["flipped"] for t in truths)),
    }
    return records, manifest


def bayes_rule_score(record: PatientRecord, manifest: dict) -> float:
    """1.0 if the close-gap risk motif is present in ``record``, else 0.0."""
    r1, r2 = manifest["planted"]["risk"]
    G = manifest["max_gap_days"]
    visits = merge_visits(record.visits)
    d1 = [v.date for v in visits if r1 in visit_tokens(v)]
    d2 = [v.date for v in visits if r2 in visit_tokens(v)]
    return float(any(abs((a - b).days) <= G for a in d1 for b in d2))


# --------------------------------------------------------------------------
# cross-validation splits


@dataclass
class Fold:
    index: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def kfold_split(labels: Sequence[int], k: int = 5, ratios: tuple = (7, 1, 2), seed: int = 0) -> list[Fold]:
    """Stratified k-fold with a train/val split of the non-test part.

    Test folds are disjoint and cover everything; with ratios 7:1:2 and
    k=5 each iteration trains on 70%, validates on 10%, tests on 20%.
    Indices refer to positions in ``labels``.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n < k:
        raise ValueError(f"need at least k={k} instances, got {n}")
    train_r, val_r, test_r = ratios
    if not math.isclose(test_r / (train_r + val_r + test_r), 1.0 / k):
        raise ValueError(f"test share {test_r}/{train_r + val_r + test_r} inconsistent with k={k}")
    rng = np.random.default_rng([seed, 0])
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in (1, 0)])
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % k
    folds = []
    for i in range(k):
        test = np.sort(np.flatnonzero(fold_of == i))
        rest = np.flatnonzero(fold_of != i)
        r = np.random.default_rng([seed, i + 1])
        val_parts, train_parts = [], []
        for c in (1, 0):
            idx = r.permutation(rest[labels[rest] == c])
            n_val = int(round(len(idx) * val_r / (train_r + val_r)))
            val_parts.append(idx[:n_val])
            train_parts.append(idx[n_val:])
        folds.append(Fold(i, np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(val_parts)), test))
    return folds
