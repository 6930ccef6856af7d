#!/usr/bin/env python3
"""Regenerates the toy pipeline fixtures under fixtures/ (deterministic)."""

import json
import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "fixtures"

EDGES = [
    ("AtLocation", "stove", "kitchen", 1.0),
    ("AtLocation", "pot", "kitchen", 1.0),
    ("AtLocation", "chair", "kitchen", 0.8),
    ("AtLocation", "table", "kitchen", 0.9),
    ("UsedFor", "stove", "cook", 1.0),
    ("UsedFor", "pot", "cook", 0.9),
    ("RelatedTo", "cook", "food", 0.7),
    ("RelatedTo", "table", "food", 0.5),
    ("AtLocation", "bed", "bedroom", 1.0),
    ("AtLocation", "pillow", "bedroom", 0.9),
    ("AtLocation", "lamp", "bedroom", 0.7),
    ("UsedFor", "bed", "sleep", 1.0),
    ("RelatedTo", "pillow", "bed", 0.8),
    ("AtLocation", "car", "street", 1.0),
    ("AtLocation", "bus", "street", 0.9),
    ("RelatedTo", "street", "road", 0.9),
    ("UsedFor", "car", "drive", 1.0),
    ("UsedFor", "bus", "drive", 0.6),
    ("AtLocation", "tree", "park", 1.0),
    ("AtLocation", "dog", "park", 0.8),
    ("AtLocation", "grass", "park", 0.9),
    ("RelatedTo", "dog", "ball", 0.7),
    ("UsedFor", "ball", "play", 1.0),
    ("RelatedTo", "person", "chair", 0.4),
    ("RelatedTo", "person", "car", 0.4),
]

SCENES = {
    "kitchen": {
        "objects": ["stove", "pot", "table", "chair", "person"],
        "captions": [
            "a person cooks food on a stove",
            "a pot sits on the stove",
            "a table and a chair in a kitchen",
            "a person stands in a kitchen",
        ],
    },
    "bedroom": {
        "objects": ["bed", "pillow", "lamp"],
        "captions": [
            "a bed with a pillow",
            "a lamp next to a bed",
            "a small bedroom with a bed",
            "a pillow on the bed",
        ],
    },
    "street": {
        "objects": ["car", "bus", "person"],
        "captions": [
            "a car drives down the street",
            "a bus on the street",
            "a person next to a car",
            "a car and a bus on a road",
        ],
    },
    "park": {
        "objects": ["dog", "tree", "grass", "ball"],
        "captions": [
            "a dog plays with a ball",
            "a dog on the grass",
            "a tree in a park",
            "a dog runs on the grass in a park",
        ],
    },
}

FEATURE_DIM = 8


def fmt(x):
    # Two decimals, never integral, so the canonical save reproduces it.
    v = round(x, 2)
    if v == int(v):
        v += 0.01 if v >= 0 else -0.01
        v = round(v, 2)
    return repr(v)


def main():
    rng = random.Random(20240601)
    OUT.mkdir(exist_ok=True)

    with open(OUT / "graph.csv", "w") as f:
        f.write("# relation,start,end,weight\n")
        for rel, a, b, w in EDGES:
            f.write(f"{rel},{a},{b},{w}\n")

    terms = sorted({t for _, a, b, _ in EDGES for t in (a, b)})
    with open(OUT / "vectors.txt", "w") as f:
        for t in terms:
            f.write(t + " " + " ".join(fmt(rng.uniform(-1, 1)) for _ in range(6)) + "\n")

    names = list(SCENES)
    centres = {s: [rng.uniform(-1, 1) for _ in range(FEATURE_DIM)] for s in names}

    def record(split, k, scene, caps):
        objs = rng.sample(SCENES[scene]["objects"], 2)
        dets = [{"label": o, "confidence": round(rng.uniform(0.5, 0.99), 2)} for o in objs]
        dets.append({"label": "person" if scene != "street" else "tree",
                     "confidence": round(rng.uniform(0.05, 0.25), 2)})
        feat = [round(c + rng.gauss(0, 0.1), 3) for c in centres[scene]]
        return {"image_id": f"{split}{k:02d}", "feature": feat, "detections": dets,
                "references": caps}

    train, test = [], []
    for k in range(16):
        scene = names[k % 4]
        caps = SCENES[scene]["captions"]
        j = (k // 4) % 4
        train.append(record("train", k, scene, [caps[j], caps[(j + 1) % 4]]))
    for k in range(4):
        scene = names[k]
        caps = SCENES[scene]["captions"]
        test.append(record("test", k, scene, [caps[k], caps[(k + 2) % 4]]))

    for name, rows in (("train.jsonl", train), ("test.jsonl", test)):
        with open(OUT / name, "w") as f:
            for r in rows:
                f.write(json.dumps(r) + "\n")

    config = {
        "seed": 7,
        "mode": "direct+indirect+image",
        "paths": {"graph": "graph.csv", "vectors": "vectors.txt",
                  "train": "train.jsonl", "test": "test.jsonl"},
        "retrofit": {"beta_policy": "inverse-degree", "sweeps": 10},
        "expansion": {"threshold": 0.3, "per_object_k": 3, "scene_k": 4, "hop_limit": 2},
        "model": {"embed": 16, "hidden": 24, "encoder_input": 8, "encoder_hidden": 8},
        "vocabulary": {"min_count": 2},
        "train": {"initial_lr": 1.0, "batch_size": 16, "max_iterations": 1500,
                  "init_scale": 0.3},
        "pretrain": {"max_iterations": 400},
        "decode": {"beam": 3, "max_length": 12},
    }
    with open(OUT / "config.json", "w") as f:
        json.dump(config, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
