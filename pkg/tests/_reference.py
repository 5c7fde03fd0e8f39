"""Reduced fine-tuning objectives written independently of lotcrs.objectives.

Each switch adds one component back. Loss and gradient math is done by hand
on the item logits; only the encoder and its backward pass are shared.
"""
import numpy as np

from lotcrs.neuralcore import Adam
from lotcrs.neuralcore.model import context_ids, encoder_backward, encoder_forward


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _labels(corpus, item_ids):
    Y = np.zeros((len(corpus), len(item_ids)))
    for r, c in enumerate(corpus):
        for t in c.target_items:
            Y[r, item_ids.index(t)] = 1.0
    return Y


def _retrieve(index, U, k):
    out = []
    for u in U:
        s = index.unit_keys @ (u / np.linalg.norm(u))
        out.append(index.payloads[np.argsort(-s, kind="stable")[:k]])
    return np.stack(out)


def _pairs(targets, n, rng):
    groups = {}
    for j, t in enumerate(targets):
        groups.setdefault(t, []).append(j)
    keys = sorted(t for t, g in groups.items() if len(g) >= 2)
    out = []
    for j in rng.choice(len(keys), size=n, replace=False):
        g = groups[keys[j]]
        a, b = rng.choice(len(g), size=2, replace=False)
        out.append((g[a], g[b]))
    return out


def _infonce_grads(params, ids1, ids2, tau):
    B = len(ids1)
    H, cache = encoder_forward(params, [*ids1, *ids2])
    h = H[:, 0, :]
    n = np.linalg.norm(h, axis=1, keepdims=True)
    u = h / n
    S = u[:B] @ u[B:].T / tau
    P = _softmax(S)
    loss = float(np.mean(np.log(np.exp(S - S.max(1, keepdims=True)).sum(1)) + S.max(1) - np.diag(S)))
    dS = (P - np.eye(B)) / B
    du = np.concatenate([dS @ u[B:], dS.T @ u[:B]]) / tau
    dh = (du - u * (u * du).sum(1, keepdims=True)) / n
    dH = np.zeros_like(H)
    dH[:, 0] = dh
    g = params.zero_grads()
    encoder_backward(params, cache, dH, g)
    return loss, g


def reduced_finetune(real, checkpoint, config, *, index=None, teacher_probs=None, sim=None):
    """Returns (per-batch losses, final params)."""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(5)]
    order_rng, pair_rng = streams[1], streams[3]
    vocab, item_ids = checkpoint.vocab, list(checkpoint.item_ids)
    params = checkpoint.params.copy()
    ctx = [context_ids(c, vocab, config.max_len) for c in real]
    Y = _labels(real, item_ids)
    if sim is not None:
        sim_t = [c.target_items[0] for c in sim]
        sim_ctx = [context_ids(c, vocab, config.max_len) for c in sim]
        n_pairs = min(config.batch_size, len({t for t in sim_t if sim_t.count(t) >= 2}))
    opt = Adam(params, config.lr_rec)
    losses = []
    for _ in range(config.rec_epochs):
        perm = order_rng.permutation(len(ctx))
        for s in range(0, len(ctx), config.batch_size):
            idx = perm[s : s + config.batch_size]
            H, cache = encoder_forward(params, [ctx[i] for i in idx])
            U = H[:, 0, :].copy()
            E = params["item_emb"]
            if index is not None:
                R = _retrieve(index, U, config.retrieval_k)
                A = _softmax(np.einsum("bd,bkd->bk", U @ params["w1"], R))
                Uf = U + config.gamma * np.einsum("bk,bkd->bd", A, R)
            else:
                Uf = U
            p = _softmax(Uf @ E.T)
            y = Y[idx]
            loss = -float((y * np.log(p) + (1 - y) * np.log(1 - p)).sum())
            dp = -y / p + (1 - y) / (1 - p)
            if teacher_probs is not None:
                t = teacher_probs[idx]
                loss += config.lambda1 * float((t * (np.log(t) - np.log(p))).sum())
                dp = dp + config.lambda1 * (-t / p)
            dz = p * (dp - (dp * p).sum(1, keepdims=True))
            g = params.zero_grads()
            g["item_emb"] += dz.T @ Uf
            dUf = dz @ E
            if index is not None:
                dA = config.gamma * np.einsum("bd,bkd->bk", dUf, R)
                ds = A * (dA - (dA * A).sum(1, keepdims=True))
                dU = dUf + np.einsum("bk,bkd->bd", ds, R @ params["w1"].T)
                g["w1"] += np.einsum("bd,bk,bke->de", U, ds, R)
            else:
                dU = dUf
            dH = np.zeros_like(H)
            dH[:, 0] = dU
            encoder_backward(params, cache, dH, g)
            if sim is not None:
                pi = _pairs(sim_t, n_pairs, pair_rng)
                lc, gc = _infonce_grads(params, [sim_ctx[a] for a, _ in pi], [sim_ctx[b] for _, b in pi], config.tau)
                loss += config.lambda2 * lc
                for k, v in gc.items():
                    g[k] += config.lambda2 * v
            opt.step(g)
            losses.append(loss)
    return losses, params
