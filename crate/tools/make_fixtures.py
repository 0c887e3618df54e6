#!/usr/bin/env python3
"""Train the tiny byte-level LM used by the test suites and write fixtures.

Outputs (under crates/core/tests/fixtures/):
  tiny_lm.mumo        weights in the MUMO binary format
  eval.txt            100 KB held-out text
  domain_a.txt        prose excerpt
  domain_b.txt        source-code excerpt
  golden.json         dense perplexity computed here in float64

Usage: python3 tools/make_fixtures.py [--steps N]
"""
import argparse
import inspect
import json
import math
import os
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "fixtures")

N_LAYERS, N_HEADS, HIDDEN, FFN, VOCAB, MAX_SEQ = 2, 4, 64, 256, 256, 128
HEAD_DIM = HIDDEN // N_HEADS
EPS = 1e-5
EVAL_BYTES = 100_000


def corpus():
    import pydoc_data.topics as t

    text = "".join(t.topics[k] for k in sorted(t.topics))
    data = text.encode("utf-8")
    return data


def domain_b_text():
    import json.decoder
    import textwrap

    src = inspect.getsource(json.decoder) + inspect.getsource(textwrap)
    return src.encode("utf-8")[:8192]


class Block(nn.Module):
    def __init__(self):
        super().__init__()
        self.ln1 = nn.LayerNorm(HIDDEN, eps=EPS)
        self.q = nn.Linear(HIDDEN, HIDDEN, bias=False)
        self.k = nn.Linear(HIDDEN, HIDDEN, bias=False)
        self.v = nn.Linear(HIDDEN, HIDDEN, bias=False)
        self.o = nn.Linear(HIDDEN, HIDDEN, bias=False)
        self.ln2 = nn.LayerNorm(HIDDEN, eps=EPS)
        self.up = nn.Linear(HIDDEN, FFN, bias=False)
        self.down = nn.Linear(FFN, HIDDEN, bias=False)

    def forward(self, h):
        b, t, _ = h.shape
        a = self.ln1(h)
        q = self.q(a).view(b, t, N_HEADS, HEAD_DIM).transpose(1, 2)
        k = self.k(a).view(b, t, N_HEADS, HEAD_DIM).transpose(1, 2)
        v = self.v(a).view(b, t, N_HEADS, HEAD_DIM).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(HEAD_DIM)
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=h.device), 1)
        att = att.masked_fill(mask, float("-inf")).softmax(-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, HIDDEN)
        h = h + self.o(y)
        h = h + self.down(F.relu(self.up(self.ln2(h))))
        return h


class TinyLM(nn.Module):
    def __init__(self):
        super().__init__()
        self.tok = nn.Embedding(VOCAB, HIDDEN)
        self.pos = nn.Embedding(MAX_SEQ, HIDDEN)
        self.blocks = nn.ModuleList(Block() for _ in range(N_LAYERS))
        self.lnf = nn.LayerNorm(HIDDEN, eps=EPS)
        nn.init.normal_(self.tok.weight, std=0.05)
        nn.init.normal_(self.pos.weight, std=0.02)

    def forward(self, ids):
        t = ids.shape[1]
        h = self.tok(ids) + self.pos(torch.arange(t, device=ids.device))[None]
        for blk in self.blocks:
            h = blk(h)
        return self.lnf(h) @ self.tok.weight.T


def write_mumo(model, path):
    def f32(t):
        return t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()

    with open(path, "wb") as f:
        f.write(b"MUMO")
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<7I", N_LAYERS, N_HEADS, HIDDEN, HEAD_DIM, FFN, VOCAB, MAX_SEQ))
        f.write(f32(model.tok.weight))
        f.write(f32(model.pos.weight))
        for blk in model.blocks:
            for lin in (blk.q, blk.k, blk.v, blk.o, blk.up, blk.down):
                f.write(f32(lin.weight))
            for ln in (blk.ln1, blk.ln2):
                f.write(f32(ln.weight))
                f.write(f32(ln.bias))
        f.write(f32(model.lnf.weight))
        f.write(f32(model.lnf.bias))


def window_nll(model, ids, max_seq, stride):
    """Sum of next-token NLL and count, scoring each target exactly once."""
    total, count, last = 0.0, 0, 0
    n = len(ids)
    begin = 0
    while True:
        end = min(begin + max_seq, n)
        x = torch.tensor(ids[begin:end], dtype=torch.long)[None]
        with torch.no_grad():
            logp = model(x)[0].log_softmax(-1)
        for j in range(end - begin - 1):
            target = begin + j + 1
            if target > last:
                total -= float(logp[j, ids[target]])
                count += 1
                last = target
        if end == n:
            break
        begin += stride
    return total, count


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args()

    torch.manual_seed(0)
    np.random.seed(0)
    os.makedirs(OUT, exist_ok=True)

    data = corpus()
    cut = data.rfind(b"\n", 0, len(data) - EVAL_BYTES) + 1
    eval_bytes = data[cut : cut + EVAL_BYTES]
    train = np.frombuffer(data[:cut], dtype=np.uint8).astype(np.int64)

    model = TinyLM()
    opt = torch.optim.AdamW(model.parameters(), lr=3e-3, weight_decay=0.01)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, args.steps)
    for step in range(args.steps):
        starts = np.random.randint(0, len(train) - MAX_SEQ - 1, size=args.batch)
        batch = torch.tensor(np.stack([train[s : s + MAX_SEQ + 1] for s in starts]))
        logits = model(batch[:, :-1])
        loss = F.cross_entropy(logits.reshape(-1, VOCAB), batch[:, 1:].reshape(-1))
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 250 == 0 or step == args.steps - 1:
            print(f"step {step} loss {loss.item():.4f}", flush=True)

    write_mumo(model, os.path.join(OUT, "tiny_lm.mumo"))

    # The golden oracle runs in float64 on the float32-rounded weights.
    model = model.double()
    with open(os.path.join(OUT, "eval.txt"), "wb") as f:
        f.write(eval_bytes)
    ids = list(eval_bytes)
    total, count = window_nll(model, ids, MAX_SEQ, MAX_SEQ)
    golden = {
        "text": "eval.txt",
        "max_seq": MAX_SEQ,
        "stride": MAX_SEQ,
        "targets": count,
        "mean_nll": total / count,
        "perplexity": math.exp(total / count),
    }
    with open(os.path.join(OUT, "golden.json"), "w") as f:
        json.dump(golden, f, indent=2)
        f.write("\n")
    print(golden)

    prose = b"\n".join(
        line for line in eval_bytes.split(b"\n") if line and not line[:1].isspace()
    )[:8192]
    with open(os.path.join(OUT, "domain_a.txt"), "wb") as f:
        f.write(prose)
    with open(os.path.join(OUT, "domain_b.txt"), "wb") as f:
        f.write(domain_b_text())


if __name__ == "__main__":
    main()
