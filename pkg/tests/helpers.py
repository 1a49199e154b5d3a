"""Shared test utilities: gradient-check oracle and synthetic corpora."""

from __future__ import annotations

import numpy as np

from diffdta.data import AffinityRecord
from diffdta.numerics import backward

# 64 plausible SMILES characters / 25 amino-acid letters, so synthetic
# corpora exercise the same vocabulary sizes as the benchmark datasets.
SMILES_ALPHABET = (
    "#%()*+-./0123456789=@ABCDEFGHIKLMNOPRSTUVWXYZ[\\]abcdeghilnoprstu"
)
PROTEIN_ALPHABET = "ACDEFGHIKLMNPQRSTVWYXBZUO"

assert len(SMILES_ALPHABET) == 64 and len(set(SMILES_ALPHABET)) == 64
assert len(PROTEIN_ALPHABET) == 25 and len(set(PROTEIN_ALPHABET)) == 25


def numerical_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, element by element."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(float(np.abs(numeric).max(initial=0.0)), 1e-6)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / denom


def check_param_grads(build_loss, store, names, eps=1e-5, tol=1e-4):
    """Compare backward() grads against finite differences for named params.

    build_loss must be a deterministic closure over the store (re-seed any
    rng it uses internally on every call).
    """
    store.zero_grad()
    loss = build_loss()
    backward(loss)
    analytic = {
        name: (store[name].grad.copy() if store[name].grad is not None
               else np.zeros_like(store[name].data))
        for name in names
    }
    store.zero_grad()
    errs = {}
    for name in names:
        p = store[name]
        def f(arr, _name=name):
            saved = store[_name].data.copy()
            store[_name].data[...] = arr
            try:
                return build_loss().item()
            finally:
                store[_name].data[...] = saved
        numeric = numerical_grad(f, p.data, eps)
        errs[name] = max_rel_err(analytic[name], numeric)
        assert errs[name] < tol, f"gradient mismatch for {name}: rel err {errs[name]:.2e}"
    return errs


def random_string(rng: np.random.Generator, alphabet: str, lo: int, hi: int) -> str:
    length = int(rng.integers(lo, hi + 1))
    return "".join(alphabet[i] for i in rng.integers(0, len(alphabet), length))


def synth_entities(n_drugs: int, n_targets: int, seed: int = 0,
                   drug_len=(16, 60), target_len=(30, 90),
                   full_alphabets: bool = True):
    """Synthetic SMILES-like and protein-like entity tables.

    With full_alphabets the first entities are padded so every alphabet
    character occurs somewhere in the corpus, pinning the vocabulary sizes
    at 64 and 25 like the benchmark corpora.
    """
    rng = np.random.default_rng(seed)
    drugs = {f"D{i:04d}": random_string(rng, SMILES_ALPHABET, *drug_len)
             for i in range(n_drugs)}
    targets = {f"T{i:04d}": random_string(rng, PROTEIN_ALPHABET, *target_len)
               for i in range(n_targets)}
    if full_alphabets:
        d_ids = list(drugs)
        chunk = drug_len[1]
        for n, start in enumerate(range(0, len(SMILES_ALPHABET), chunk)):
            drugs[d_ids[n]] = SMILES_ALPHABET[start:start + chunk]
        t_ids = list(targets)
        chunk = target_len[1]
        for n, start in enumerate(range(0, len(PROTEIN_ALPHABET), chunk)):
            targets[t_ids[n]] = PROTEIN_ALPHABET[start:start + chunk]
    return drugs, targets


def synth_records(n_drugs: int, n_targets: int, n_pairs: int | None = None,
                  seed: int = 0, **kwargs) -> list[AffinityRecord]:
    """Labeled interaction records over synthetic entities.

    n_pairs None means the full drug x target matrix; otherwise that many
    pairs sampled without replacement. Labels are a smooth deterministic
    function of the entity indices plus seeded noise, in a pKd-like range.
    """
    drugs, targets = synth_entities(n_drugs, n_targets, seed, **kwargs)
    rng = np.random.default_rng(seed + 1)
    d_ids = list(drugs)
    t_ids = list(targets)
    if n_pairs is None:
        pair_idx = [(i, j) for i in range(n_drugs) for j in range(n_targets)]
    else:
        chosen = rng.choice(n_drugs * n_targets, size=n_pairs, replace=False)
        pair_idx = [(int(c) // n_targets, int(c) % n_targets) for c in chosen]
    records = []
    for i, j in pair_idx:
        label = 5.0 + 2.5 * (np.sin(0.7 * i) * np.cos(0.3 * j) + 1.0) / 2.0
        label += 0.3 * rng.standard_normal()
        records.append(AffinityRecord(
            d_ids[i], drugs[d_ids[i]], t_ids[j], targets[t_ids[j]], float(label)))
    return records


def records_to_tsv(path, records) -> None:
    lines = ["drug_id\tsmiles\ttarget_id\tsequence\taffinity"]
    for r in records:
        lines.append(f"{r.drug_id}\t{r.smiles}\t{r.target_id}\t{r.sequence}\t{r.affinity:.6f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
