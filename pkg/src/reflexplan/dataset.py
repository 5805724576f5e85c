"""Dataset files: a JSON-lines manifest plus a flat little-endian float32
sidecar holding encoded trajectories and condition vectors.

Layout on disk (a directory):
    manifest.jsonl   first line is a header record carrying the payload
                     digest; one item record per scenario after that
    data.bin         concatenated float32 blobs, byte offsets in the manifest

Writing the same records twice produces byte-identical files; nothing is
timestamped.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenario import (
    Arc,
    RoadSpec,
    Straight,
    assemble_conditions,
    classify_high_lat,
    generate_scenario,
)
from .trajectory import encode_state

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"
PAYLOAD_NAME = "data.bin"


def road_to_json(spec: RoadSpec) -> dict:
    segs = []
    for seg in spec.segments:
        if isinstance(seg, Straight):
            segs.append({"type": "straight", "length": seg.length})
        else:
            segs.append({"type": "arc", "radius": seg.radius, "sweep": seg.sweep})
    return {"segments": segs, "lane_half_width": spec.lane_half_width,
            "speed_limit": spec.speed_limit, "start_pose": list(spec.start_pose)}


def road_from_json(d: dict) -> RoadSpec:
    segs = []
    for s in d["segments"]:
        if s["type"] == "straight":
            segs.append(Straight(length=s["length"]))
        elif s["type"] == "arc":
            segs.append(Arc(radius=s["radius"], sweep=s["sweep"]))
        else:
            raise ValueError(f"unknown segment type {s['type']!r}")
    return RoadSpec(segments=tuple(segs), lane_half_width=d["lane_half_width"],
                    speed_limit=d["speed_limit"], start_pose=tuple(d["start_pose"]))


@dataclass
class Dataset:
    x0: np.ndarray        # (N, state_dim) float64, decoded from the f4 payload
    c_full: np.ndarray    # (N, condition_dim)
    c_dec: np.ndarray
    kinds: list
    seeds: list
    high_lat: np.ndarray  # (N,) bool
    roads: list           # road dicts as stored in the manifest

    def __len__(self) -> int:
        return self.x0.shape[0]


def build_records(kind_counts: list, seed: int) -> Dataset:
    """Generate scenarios and their training tensors.

    kind_counts is an ordered list of (kind, count); scenario seeds are
    seed + running index so every record is independently reproducible.
    """
    x0s, fulls, decs, kinds, seeds, flags, roads = [], [], [], [], [], [], []
    i = 0
    for kind, count in kind_counts:
        for _ in range(count):
            scene, truth = generate_scenario(kind, seed + i)
            cs = assemble_conditions(scene)
            x0s.append(encode_state(truth).ravel())
            fulls.append(cs.c_full)
            decs.append(cs.c_decouple)
            kinds.append(kind)
            seeds.append(seed + i)
            flags.append(bool(classify_high_lat(truth)))
            roads.append(road_to_json(scene.road))
            i += 1
    return Dataset(x0=np.asarray(x0s), c_full=np.asarray(fulls),
                   c_dec=np.asarray(decs), kinds=kinds, seeds=seeds,
                   high_lat=np.asarray(flags, dtype=bool), roads=roads)


def _blob(arr: np.ndarray) -> bytes:
    return np.asarray(arr, dtype="<f4").tobytes()


def save_dataset(out_dir, ds: Dataset, seed: int, force: bool = False) -> dict:
    """Write manifest + payload; returns the header record."""
    out = Path(out_dir)
    manifest = out / MANIFEST_NAME
    if manifest.exists() and not force:
        raise FileExistsError(f"{manifest} exists; pass force to overwrite")
    out.mkdir(parents=True, exist_ok=True)

    payload = bytearray()
    items = []
    for i in range(len(ds)):
        entry = {"record": "item", "index": i, "kind": ds.kinds[i],
                 "seed": ds.seeds[i], "high_lat": bool(ds.high_lat[i]),
                 "road": ds.roads[i]}
        for name, arr in (("x0", ds.x0[i]), ("c_full", ds.c_full[i]),
                          ("c_dec", ds.c_dec[i])):
            blob = _blob(arr)
            entry[name] = {"offset": len(payload), "count": int(arr.size)}
            payload.extend(blob)
        items.append(entry)

    digest = hashlib.sha256(bytes(payload)).hexdigest()
    header = {"record": "header", "version": FORMAT_VERSION, "dtype": "<f4",
              "count": len(ds), "seed": seed, "payload": PAYLOAD_NAME,
              "payload_sha256": digest,
              "state_dim": int(ds.x0.shape[1]) if len(ds) else 0,
              "condition_dim": int(ds.c_full.shape[1]) if len(ds) else 0}
    with open(out / PAYLOAD_NAME, "wb") as f:
        f.write(bytes(payload))
    with open(manifest, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for entry in items:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    return header


def load_dataset(in_dir) -> Dataset:
    """Read a dataset directory back, verifying the payload digest."""
    src = Path(in_dir)
    manifest = src / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    with open(manifest) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("record") != "header":
        raise ValueError("manifest must start with a header record")
    header = lines[0]
    if header["version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {header['version']}")
    payload = (src / header["payload"]).read_bytes()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise ValueError("dataset payload digest mismatch")
    items = lines[1:]
    if len(items) != header["count"]:
        raise ValueError("manifest item count disagrees with header")

    def read(entry):
        o, n = entry["offset"], entry["count"]
        return np.frombuffer(payload, dtype="<f4", count=n, offset=o).astype(np.float64)

    x0 = np.stack([read(it["x0"]) for it in items]) if items else np.zeros((0, 0))
    c_full = np.stack([read(it["c_full"]) for it in items]) if items else np.zeros((0, 0))
    c_dec = np.stack([read(it["c_dec"]) for it in items]) if items else np.zeros((0, 0))
    return Dataset(x0=x0, c_full=c_full, c_dec=c_dec,
                   kinds=[it["kind"] for it in items],
                   seeds=[it["seed"] for it in items],
                   high_lat=np.asarray([it["high_lat"] for it in items], dtype=bool),
                   roads=[it["road"] for it in items])


def dataset_digest(in_dir) -> str:
    """Digest of the manifest file itself (covers header + payload digest)."""
    return hashlib.sha256((Path(in_dir) / MANIFEST_NAME).read_bytes()).hexdigest()
