"""Pure-numpy versions of the compiled trimming kernels (same signatures, same results)."""
import numpy as np


def identity_to(tokens, ref, gap_id):
    tokens = np.asarray(tokens)
    L = tokens.shape[1]
    if L == 0:
        return np.zeros(tokens.shape[0])
    matches = ((tokens == ref[None, :]) & (tokens != gap_id)).sum(axis=1)
    return matches / L


def coverage_rows(tokens, gap_id):
    tokens = np.asarray(tokens)
    L = tokens.shape[1]
    if L == 0:
        return np.zeros(tokens.shape[0])
    return (tokens != gap_id).sum(axis=1) / L


def hamming_to(tokens, ref):
    return (np.asarray(tokens) != ref[None, :]).sum(axis=1).astype(np.int64)


def greedy_admit(tokens, order, n_max, ident_max, gap_id):
    tokens = np.asarray(tokens)
    L = tokens.shape[1]
    pool = [0]
    if L == 0:
        pool.extend(int(c) for c in order[: max(n_max - 1, 0)])
        return np.array(pool[:n_max], dtype=np.int64)
    nongap = tokens != gap_id
    for cand in order:
        if len(pool) >= n_max:
            break
        members = tokens[pool]
        matches = ((members == tokens[cand]) & nongap[cand]).sum(axis=1)
        if np.all(matches / L <= ident_max):
            pool.append(int(cand))
    return np.array(pool[:n_max], dtype=np.int64)
