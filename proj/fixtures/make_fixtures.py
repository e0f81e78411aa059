#!/usr/bin/env python3
"""Regenerates expert_q.csv and annotations_sample.json.

The expert matrix encodes the per-item misconception sets below (76 ones over
26 x 34 cells). The sample annotation set is shaped so that building
candidate matrices at the three tiers and comparing them against the expert
matrix reproduces the gpt-5 confusion rows used by the test suite:
  High:   TP 41 FP 52  (93 ones)
  +Med:   TP 56 FP 126 (182 ones)
  +Low:   TP 61 FP 188 (249 ones)
"""

import json
import random
from pathlib import Path

HERE = Path(__file__).parent

EXPERT = {
    "q01": ["D27", "D29", "B12"],
    "q02": ["D30", "D31", "A4"],
    "q03": ["B13", "C21", "C25"],
    "q04": ["B14", "B9", "B17"],
    "q05": ["C26", "A5", "C23", "B16"],
    "q06": ["B17", "B9"],
    "q07": ["D30", "D31", "C24"],
    "q08": ["A8", "A7", "A1"],
    "q09": ["D35", "A8", "C24"],
    "q10": ["C18", "C19", "A4"],
    "q11": ["B10", "A5"],
    "q12": ["D34", "B15", "A3"],
    "q13": ["C20", "A2"],
    "q14": ["C21", "B14", "C23"],
    "q15": ["B16", "B13"],
    "q16": ["D28", "D29", "A4", "D27"],
    "q17": ["A4", "A3", "C19"],
    "q18": ["D30", "D31"],
    "q19": ["D35", "C18", "D29"],
    "q20": ["A1", "A2", "B11"],
    "q21": ["A3", "A4", "A6", "C18"],
    "q22": ["C25", "B13", "C23"],
    "q23": ["B15", "B14", "B9"],
    "q24": ["D32", "A7"],
    "q25": ["D33", "B16", "C20"],
    "q26": ["A6", "A1", "B9", "A2"],
}

RATIONALES = [
    "Choosing ({opt}) is a direct expression of {mid}.",
    "A student holding {mid} would find option ({opt}) attractive.",
    "Option ({opt}) rewards the reasoning described by {mid}.",
    "The wording of ({opt}) mirrors {mid} closely.",
]


def main():
    library = json.loads((HERE / "library.json").read_text())
    attr_ids = [e["id"] for e in library]
    items = json.loads((HERE / "items.json").read_text())
    item_ids = [it["item_id"] for it in items]
    assert len(attr_ids) == 34 and len(item_ids) == 26

    # expert matrix
    ones = 0
    lines = ["item," + ",".join(attr_ids)]
    for iid in item_ids:
        attrs = set(EXPERT[iid])
        assert attrs <= set(attr_ids), (iid, attrs - set(attr_ids))
        row = ["1" if a in attrs else "0" for a in attr_ids]
        ones += sum(c == "1" for c in row)
        lines.append(iid + "," + ",".join(row))
    assert ones == 76, ones
    (HERE / "expert_q.csv").write_text("\n".join(lines) + "\n")

    # tiered annotation sample
    rng = random.Random(20260810)
    expert_cells = [(iid, a) for iid in item_ids for a in EXPERT[iid]]
    non_expert = [(iid, a) for iid in item_ids for a in attr_ids
                  if a not in set(EXPERT[iid])]
    assert len(expert_cells) == 76 and len(non_expert) == 808

    def take(pool, n):
        picked = rng.sample(pool, n)
        for p in picked:
            pool.remove(p)
        return picked

    plan = []  # (item, attr, tier)
    for tier, n_tp, n_fp in (("High", 41, 52), ("Medium", 15, 74), ("Low", 5, 62)):
        for cell in take(expert_cells, n_tp) + take(non_expert, n_fp):
            plan.append((cell[0], cell[1], tier))
    assert len(plan) == 249

    distractors = {
        it["item_id"]: [o["option_id"] for o in it["options"] if not o["is_correct"]]
        for it in items
    }
    cursor = {iid: 0 for iid in item_ids}
    by_item_option = {}
    for iid, attr, tier in plan:
        opts = distractors[iid]
        opt = opts[cursor[iid] % len(opts)]
        cursor[iid] += 1
        by_item_option.setdefault(iid, {}).setdefault(opt, []).append((attr, tier))

    out_items = []
    n = 0
    for it in items:
        iid = it["item_id"]
        options = []
        for o in it["options"]:
            labels = []
            for attr, tier in by_item_option.get(iid, {}).get(o["option_id"], []):
                labels.append({
                    "misconception_id": attr,
                    "confidence": tier,
                    "rationale": RATIONALES[n % len(RATIONALES)].format(
                        opt=o["option_id"], mid=attr),
                })
                n += 1
            options.append({"option_id": o["option_id"], "labels": labels})
        out_items.append({"item_id": iid, "options": options})

    doc = {
        "provenance": {
            "model": "gpt-5",
            "prompt_version": "V3",
            "endpoint_label": "cloud-gpt5",
            "temperature": 0.0,
            "timestamp": "2026-08-01T09:30:00Z",
        },
        "items": out_items,
        "failures": [],
    }
    (HERE / "annotations_sample.json").write_text(json.dumps(doc, indent=2) + "\n")
    print("expert ones:", ones, "| labels:", len(plan))


if __name__ == "__main__":
    main()
