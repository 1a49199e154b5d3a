"""Dataset ingestion, label transforms, tokenization, cold-start splits.

Input format is a 5-column UTF-8 TSV with header
``drug_id\tsmiles\ttarget_id\tsequence\taffinity``. Splits partition the
unique drugs and targets into old/new groups and route every interaction
by its (drug, target) status: (old, old) to train, (new, old) to the
unseen-drug setting, (old, new) to unseen-target, (new, new) to
unseen-pair. Each setting is then halved into validation and test.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER = ["drug_id", "smiles", "target_id", "sequence", "affinity"]

# default fixed tokenization lengths (drug, target) per benchmark corpus
MAX_LENGTHS = {
    "davis": (85, 1200),
    "kiba": (100, 1000),
    "generic": (100, 1000),
}

SETTINGS = ("ud", "ut", "up")


@dataclass(frozen=True)
class AffinityRecord:
    drug_id: str
    smiles: str
    target_id: str
    sequence: str
    affinity: float


@dataclass(frozen=True)
class Vocabulary:
    """Character -> index map; indices are 1..size, 0 is reserved padding."""
    kind: str  # "smiles" | "protein"
    token_to_index: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.token_to_index)

    pad_index = 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "token_to_index": self.token_to_index}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(kind=d["kind"], token_to_index=dict(d["token_to_index"]))


@dataclass
class ColdStartSplit:
    seed: int
    drug_partition: dict[str, str]     # id -> "old" | "new"
    target_partition: dict[str, str]
    train: list[int] = field(default_factory=list)
    val: dict[str, list[int]] = field(default_factory=dict)   # setting -> indices
    test: dict[str, list[int]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def load_tsv(path) -> list[AffinityRecord]:
    """Parse an affinity TSV; raises with the 1-based line number on bad rows."""
    path = Path(path)
    expected_header = "\t".join(HEADER)
    records: list[AffinityRecord] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\n").rstrip("\r")
        if header != expected_header:
            raise ValueError(
                f"{path}: line 1: expected header {expected_header!r}, got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n").rstrip("\r")
            fields = line.split("\t")
            if len(fields) != 5:
                raise ValueError(
                    f"{path}: line {lineno}: expected 5 tab-separated fields, got {len(fields)}")
            drug_id, smiles, target_id, sequence, affinity_s = fields
            try:
                affinity = float(affinity_s)
            except ValueError:
                raise ValueError(
                    f"{path}: line {lineno}: unparsable affinity {affinity_s!r}") from None
            if not smiles:
                raise ValueError(f"{path}: line {lineno}: empty smiles")
            if not sequence:
                raise ValueError(f"{path}: line {lineno}: empty sequence")
            if not math.isfinite(affinity):
                raise ValueError(f"{path}: line {lineno}: non-finite affinity")
            records.append(AffinityRecord(drug_id, smiles, target_id, sequence, affinity))
    return records


def kd_to_pkd(kd: float) -> float:
    """Nanomolar dissociation constant to its negative log scale: -log10(kd) + 9."""
    if not kd > 0:
        raise ValueError(f"kd must be positive, got {kd}")
    return -math.log10(kd) + 9.0


def build_vocab(records: list[AffinityRecord], kind: str) -> Vocabulary:
    """Character vocabulary over the corpus, sorted by code point, indices 1..V."""
    if not records:
        raise ValueError("build_vocab: need at least one record")
    if kind == "smiles":
        chars = {c for r in records for c in r.smiles}
    elif kind == "protein":
        chars = {c for r in records for c in r.sequence}
    else:
        raise ValueError(f"build_vocab: unknown kind {kind!r}")
    return Vocabulary(kind, {c: i for i, c in enumerate(sorted(chars), start=1)})


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    """Fixed-length integer encoding: truncate beyond max_len, pad with 0."""
    if max_len < 1:
        raise ValueError(f"tokenize: max_len must be >= 1, got {max_len}")
    out = np.zeros(max_len, dtype=np.int32)
    for i, c in enumerate(text[:max_len]):
        idx = vocab.token_to_index.get(c)
        if idx is None:
            raise ValueError(f"tokenize: character {c!r} not in {vocab.kind} vocabulary")
        out[i] = idx
    return out


def detokenize(tokens: np.ndarray, vocab: Vocabulary) -> str:
    """Inverse of tokenize over the non-pad prefix."""
    rev = {i: c for c, i in vocab.token_to_index.items()}
    chars = []
    for t in tokens:
        if t == vocab.pad_index:
            break
        chars.append(rev[int(t)])
    return "".join(chars)


def tokenize_records(records, drug_vocab, target_vocab, max_drug_len, max_target_len):
    """Token matrices plus label vector for a record list."""
    n = len(records)
    drug_tokens = np.zeros((n, max_drug_len), dtype=np.int32)
    target_tokens = np.zeros((n, max_target_len), dtype=np.int32)
    labels = np.zeros(n, dtype=np.float64)
    for i, r in enumerate(records):
        drug_tokens[i] = tokenize(r.smiles, drug_vocab, max_drug_len)
        target_tokens[i] = tokenize(r.sequence, target_vocab, max_target_len)
        labels[i] = r.affinity
    return drug_tokens, target_tokens, labels


def _unique_in_order(ids) -> list[str]:
    seen = set()
    out = []
    for x in ids:
        if x not in seen:
            seen.add(x)
            out.append(x)
    return out


def cold_start_split(records: list[AffinityRecord], drug_frac: float = 0.8,
                     target_frac: float = 0.8, seed: int = 0) -> ColdStartSplit:
    """Partition entities old/new and route every record into one bucket.

    The unique drug ids (first-appearance order) are shuffled by the seed;
    the first floor(drug_frac * n) are old, the rest new. Targets likewise.
    Each cold-start setting is shuffled and halved, the odd element going
    to test. Empty buckets are recorded as warnings, never errors.
    """
    if not records:
        raise ValueError("cold_start_split: no records")
    if not (0.0 < drug_frac < 1.0 and 0.0 < target_frac < 1.0):
        raise ValueError(
            f"cold_start_split: fractions must lie in (0, 1), got {drug_frac}, {target_frac}")

    rng = np.random.default_rng(seed)

    def partition(ids: list[str], frac: float) -> dict[str, str]:
        ids = list(ids)
        perm = rng.permutation(len(ids))
        # floor rounding, but never an empty old (training) side
        n_old = max(1, int(math.floor(frac * len(ids))))
        status = {}
        for rank, idx in enumerate(perm):
            status[ids[idx]] = "old" if rank < n_old else "new"
        return status

    drug_partition = partition(_unique_in_order(r.drug_id for r in records), drug_frac)
    target_partition = partition(_unique_in_order(r.target_id for r in records), target_frac)

    split = ColdStartSplit(seed=seed, drug_partition=drug_partition,
                           target_partition=target_partition)
    routed: dict[str, list[int]] = {"train": [], "ud": [], "ut": [], "up": []}
    for i, r in enumerate(records):
        d_new = drug_partition[r.drug_id] == "new"
        t_new = target_partition[r.target_id] == "new"
        if d_new and t_new:
            routed["up"].append(i)
        elif d_new:
            routed["ud"].append(i)
        elif t_new:
            routed["ut"].append(i)
        else:
            routed["train"].append(i)

    split.train = routed["train"]
    if not split.train:
        split.warnings.append("train bucket is empty")
    for setting in SETTINGS:
        idxs = np.array(routed[setting], dtype=np.int64)
        if idxs.size:
            idxs = idxs[rng.permutation(idxs.size)]
        half = idxs.size // 2
        split.val[setting] = [int(i) for i in idxs[:half]]
        split.test[setting] = [int(i) for i in idxs[half:]]
        if not idxs.size:
            split.warnings.append(f"{setting} bucket is empty")
    return split


def split_to_manifest(split: ColdStartSplit) -> dict:
    buckets = {"train": split.train}
    for setting in SETTINGS:
        buckets[f"{setting}_val"] = split.val[setting]
        buckets[f"{setting}_test"] = split.test[setting]
    return {
        "seed": split.seed,
        "drug_partition": split.drug_partition,
        "target_partition": split.target_partition,
        "buckets": buckets,
        "warnings": split.warnings,
    }


def split_from_manifest(d: dict) -> ColdStartSplit:
    split = ColdStartSplit(seed=d["seed"],
                           drug_partition=dict(d["drug_partition"]),
                           target_partition=dict(d["target_partition"]))
    split.train = list(d["buckets"]["train"])
    for setting in SETTINGS:
        split.val[setting] = list(d["buckets"][f"{setting}_val"])
        split.test[setting] = list(d["buckets"][f"{setting}_test"])
    split.warnings = list(d.get("warnings", []))
    return split


def write_json(path, payload: dict) -> None:
    """Canonical JSON writer so identical inputs give identical bytes."""
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


@dataclass
class TokenizedDataset:
    """Token matrices, labels, and entity ids in source-file order."""
    drug_tokens: np.ndarray
    target_tokens: np.ndarray
    labels: np.ndarray
    drug_ids: list[str]
    target_ids: list[str]
    drug_vocab: Vocabulary
    target_vocab: Vocabulary

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, indices) -> "TokenizedDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return TokenizedDataset(
            drug_tokens=self.drug_tokens[idx],
            target_tokens=self.target_tokens[idx],
            labels=self.labels[idx],
            drug_ids=[self.drug_ids[i] for i in idx],
            target_ids=[self.target_ids[i] for i in idx],
            drug_vocab=self.drug_vocab,
            target_vocab=self.target_vocab,
        )


def save_dataset(out_dir, records: list[AffinityRecord], dataset_kind: str,
                 max_drug_len: int, max_target_len: int,
                 source: str = "") -> Path:
    """Materialize vocabularies, token arrays (.npy), and the manifest JSON.

    Plain .npy files keep the outputs byte-stable across identical runs
    (zip containers would embed timestamps).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    drug_vocab = build_vocab(records, "smiles")
    target_vocab = build_vocab(records, "protein")
    drug_tokens, target_tokens, labels = tokenize_records(
        records, drug_vocab, target_vocab, max_drug_len, max_target_len)
    np.save(out_dir / "drug_tokens.npy", drug_tokens)
    np.save(out_dir / "target_tokens.npy", target_tokens)
    np.save(out_dir / "labels.npy", labels)
    write_json(out_dir / "vocab_smiles.json", drug_vocab.to_dict())
    write_json(out_dir / "vocab_protein.json", target_vocab.to_dict())
    manifest = {
        "schema_version": 1,
        "dataset": dataset_kind,
        "source": source,
        "n_records": len(records),
        "n_drugs": len({r.drug_id for r in records}),
        "n_targets": len({r.target_id for r in records}),
        "max_drug_len": max_drug_len,
        "max_target_len": max_target_len,
        "drug_vocab_size": drug_vocab.size,
        "target_vocab_size": target_vocab.size,
        "drug_ids": [r.drug_id for r in records],
        "target_ids": [r.target_id for r in records],
        "files": {
            "drug_tokens": "drug_tokens.npy",
            "target_tokens": "target_tokens.npy",
            "labels": "labels.npy",
            "vocab_smiles": "vocab_smiles.json",
            "vocab_protein": "vocab_protein.json",
        },
    }
    manifest_path = out_dir / "manifest.json"
    write_json(manifest_path, manifest)
    return manifest_path


def load_dataset(manifest_path) -> tuple[TokenizedDataset, dict]:
    manifest_path = Path(manifest_path)
    manifest = read_json(manifest_path)
    base = manifest_path.parent
    files = manifest["files"]
    ds = TokenizedDataset(
        drug_tokens=np.load(base / files["drug_tokens"]),
        target_tokens=np.load(base / files["target_tokens"]),
        labels=np.load(base / files["labels"]),
        drug_ids=list(manifest["drug_ids"]),
        target_ids=list(manifest["target_ids"]),
        drug_vocab=Vocabulary.from_dict(read_json(base / files["vocab_smiles"])),
        target_vocab=Vocabulary.from_dict(read_json(base / files["vocab_protein"])),
    )
    return ds, manifest
