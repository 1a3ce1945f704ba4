#!/usr/bin/env python3
"""Recompute every reported metric of a run directory from its per-example dumps.

    recompute_metrics.py RUN_DIR [RUN_DIR ...]

Exits 0 when every value matches exactly, 1 otherwise.
"""

import json
import math
import sys
from collections import Counter
from pathlib import Path


def lines(path):
    with open(path) as f:
        return [json.loads(l) for l in f if l.strip()]


def words(token):
    return token.replace("_", " ").lower().split()


def f1(pred, gold):
    p, g = words(pred), words(gold)
    if not p or not g:
        return 1.0 if not p and not g else 0.0
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision = common / len(p)
    recall = common / len(g)
    return 2.0 * precision * recall / (precision + recall)


def perplexity(rows):
    total = 0.0
    for r in rows:
        total += r["nll"]
    return math.exp(total / len(rows))


def em_f1(rows):
    em = f = n = 0.0
    for r in rows:
        if not r["object_side"]:
            continue
        em += 1 if words(r["top1"]) == words(r["target"]) else 0
        f += f1(r["top1"], r["target"])
        n += 1
    return em / n, f / n


def false_rate(probs, alpha, threshold):
    pos, negs = {}, {}
    for r in probs:
        if r["prompt_kind"] == "positive":
            pos[r["fact_id"]] = r["p_object"]
        else:
            negs.setdefault(r["fact_id"], {})[r["prompt_idx"]] = r["p_object"]
    n_false = 0
    for fact in sorted(pos):
        total = 0.0
        for k in sorted(negs[fact]):
            total += negs[fact][k]
        mean = total / len(negs[fact])
        if (pos[fact] + alpha) / (mean + alpha) < threshold:
            n_false += 1
    return n_false / len(pos)


class Checker:
    def __init__(self):
        self.checked = 0
        self.bad = []

    def expect(self, what, reported, derived):
        self.checked += 1
        if reported != derived:
            self.bad.append(f"{what}: reported {reported!r}, derived {derived!r}")

    def row(self, where, row, dumps, prefix, alpha, threshold):
        ori = lines(dumps / f"{prefix}_original.jsonl")
        if "ori_ppl" in row:
            self.expect(f"{where} ori_ppl", row["ori_ppl"], perplexity(ori))
            self.expect(f"{where} adv_ppl", row["adv_ppl"], perplexity(lines(dumps / f"{prefix}_adversarial.jsonl")))
            self.expect(f"{where} lm_ppl", row["lm_ppl"], perplexity(lines(dumps / f"{prefix}_lm.jsonl")))
        em, f = em_f1(ori)
        self.expect(f"{where} em", row["em"], em)
        self.expect(f"{where} f1", row["f1"], f)
        probs = lines(dumps / f"{prefix}_probabilities.jsonl")
        self.expect(f"{where} false_rate", row["false_rate"], false_rate(probs, alpha, threshold))


def check_run(run, c):
    name = run.name
    cka = json.loads((run / "assess" / "manifest.json").read_text())["config"]["cka"]
    alpha, threshold = cka["alpha"], cka["threshold"]

    summary = json.loads((run / "pretrain" / "summary.json").read_text())
    c.expect(f"{name} pretrain seen ppl", summary["seen_train_perplexity"],
             perplexity(lines(run / "pretrain" / "dumps" / "seen.jsonl")))

    report = json.loads((run / "assess" / "report.json").read_text())
    c.expect(f"{name} assess false_rate", report["false_rate"],
             false_rate(lines(run / "assess" / "probabilities.jsonl"), alpha, threshold))
    preds = lines(run / "assess" / "predictions.jsonl")
    em = f = 0.0
    for p in preds:
        em += 1 if words(p["top1"]) == words(p["object"]) else 0
        f += f1(p["top1"], p["object"])
    c.expect(f"{name} assess mean_em", report["mean_em"], em / len(preds))
    c.expect(f"{name} assess mean_f1", report["mean_f1"], f / len(preds))

    results = run / "calibrate" / "results.json"
    if results.exists():
        c.row(f"{name} calibrate", json.loads(results.read_text()), run / "calibrate" / "dumps", "calinet", alpha, threshold)
    results = run / "continue_pretrain" / "results.json"
    if results.exists():
        c.row(f"{name} continue_pretrain", json.loads(results.read_text()), run / "continue_pretrain" / "dumps", "cp",
              alpha, threshold)
    table = run / "eval" / "table.json"
    if table.exists():
        prefix = {"Vanilla": "vanilla", "CaliNet": "calinet", "C.P.": "cp"}
        for row in json.loads(table.read_text())["rows"]:
            c.row(f"{name} eval {row['model']}", row, run / "eval" / "dumps", prefix[row["model"]], alpha, threshold)
    sweeps = run / "sweep"
    if sweeps.exists():
        for axis in sorted(sweeps.iterdir()):
            for p in json.loads((axis / "sweep.json").read_text())["points"]:
                c.row(f"{name} sweep {axis.name}={p['value']}", p, axis / "dumps", f"point_{p['value']}", alpha, threshold)


def main(argv):
    if len(argv) < 2:
        print(__doc__.strip(), file=sys.stderr)
        return 2
    c = Checker()
    for arg in argv[1:]:
        check_run(Path(arg), c)
    for b in c.bad:
        print("mismatch", b)
    print(f"{c.checked} values checked, {len(c.bad)} mismatches")
    return 0 if not c.bad and c.checked else 1


if __name__ == "__main__":
    sys.exit(main(sys.argv))
