"""Dataset container plus on-disk round trip.

A dataset on disk is one CSV per trial with header ``t,y_1..y_N`` (observed
times only) and a JSON sidecar recording the grid, the observation mask,
and the full generator config including its seed, so synthetic latents can
be regenerated deterministically at evaluation time.
"""

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .grids import TimeGrid


@dataclass
class Dataset:
    grid: TimeGrid
    y: np.ndarray                 # (trials, T+1, N), zeros where unobserved
    config: dict = None           # generator config (pass-through)
    latents: np.ndarray = None    # (trials, T+1, D) when synthetic

    @property
    def n_trials(self):
        return self.y.shape[0]

    @property
    def n_out(self):
        return self.y.shape[2]


def write_dataset(out_dir, dataset):
    os.makedirs(out_dir, exist_ok=True)
    grid = dataset.grid
    idx = np.nonzero(grid.obs_mask)[0]
    n_out = dataset.n_out
    header = ["t"] + [f"y_{j + 1}" for j in range(n_out)]
    for trial in range(dataset.n_trials):
        path = os.path.join(out_dir, f"trial_{trial:03d}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in idx:
                writer.writerow(
                    [repr(float(grid.times[i]))]
                    + [repr(float(v)) for v in dataset.y[trial, i]]
                )
    sidecar = {
        "times": [float(t) for t in grid.times],
        "obs_mask": [bool(v) for v in grid.obs_mask],
        "n_trials": int(dataset.n_trials),
        "n_out": int(n_out),
        "config": dataset.config,
    }
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)


def read_dataset(in_dir):
    with open(os.path.join(in_dir, "dataset.json")) as fh:
        sidecar = json.load(fh)
    times = np.asarray(sidecar["times"], dtype=float)
    mask = np.asarray(sidecar["obs_mask"], dtype=bool)
    grid = TimeGrid(times=times, obs_mask=mask)
    n_trials = sidecar["n_trials"]
    n_out = sidecar["n_out"]
    y = np.zeros((n_trials, times.size, n_out))
    idx = np.nonzero(mask)[0]
    for trial in range(n_trials):
        path = os.path.join(in_dir, f"trial_{trial:03d}.csv")
        rows = []
        with open(path) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[0] != "t" or len(header) != n_out + 1:
                raise ValueError(f"unexpected CSV header in {path}")
            for row in reader:
                rows.append([float(v) for v in row])
        rows = np.asarray(rows, dtype=float)
        if rows.shape[0] != idx.size:
            raise ValueError(f"{path}: row count does not match obs mask")
        grid.require_contains(rows[:, 0])
        y[trial, idx] = rows[:, 1:]
    return Dataset(grid=grid, y=y, config=sidecar.get("config"))


def append_jsonl(path, record):
    """Append one diagnostics record as a JSON line (parseable mid-run)."""
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True, default=float) + "\n")


def read_jsonl(path):
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
