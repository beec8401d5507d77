"""Full-scale pipeline artifacts used by the acceptance suite.

Run ``python3 tests/pipeline.py [--config FILE] [--jobs N]`` to build them ahead
of time.  Artifacts live in ``artifacts/<config hash>/`` (or under
``$NEEDLEFORGE_ARTIFACTS``); every step is skipped when its output exists, so
an interrupted build resumes where it stopped.
"""

from __future__ import annotations

import argparse
import contextlib
import io
import json
import os
import sys
import time
from pathlib import Path

from needleforge import cli
from needleforge.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def artifact_dir(cfg):
    base = Path(os.environ.get("NEEDLEFORGE_ARTIFACTS", ROOT / "artifacts"))
    return base / cfg.hash()


def _cli_json(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main(argv + ["--json"])
    if code != 0:
        raise RuntimeError(f"needleforge {' '.join(argv)} exited with {code}")
    return json.loads(buf.getvalue())


def _step(path, argv, log):
    path = Path(path)
    if path.is_file():
        return json.loads(path.read_text())
    log(f"running: needleforge {' '.join(argv)}")
    start = time.perf_counter()
    out = _cli_json(argv)
    out["wall_seconds"] = time.perf_counter() - start
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)
    return out


def build(config=None, jobs=None, log=print):
    """Generate data, train, evaluate, compare both sets and benchmark."""
    cfg = load_config(config)
    d = artifact_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    common = ["--config", str(config)] if config else []
    par = ["--jobs", str(jobs)] if jobs else []
    res = {"dir": d, "config": cfg}
    res["gen"] = _step(d / "gen.json", ["gen-data", "--trajectories", "straight", "--split",
                                         "--out", str(d / "data.csv")] + common + par, log)
    res["train"] = _step(d / "train.json", ["train", "--data", str(d / "data_train.csv"),
                                             "--out", str(d / "model.json")] + common, log)
    res["eval"] = _step(d / "eval.json", ["eval-model", "--data", str(d / "data_test.csv"),
                                           "--model", str(d / "model.json")], log)
    for s in ("straight", "curved"):
        res[s] = _step(d / f"compare_{s}.json",
                       ["compare", "--model", str(d / "model.json"), "--sets", s,
                        "--out", str(d / f"report_{s}")] + common + par, log)
    res["bench"] = _step(d / "bench.json", ["bench", "--model", str(d / "model.json"),
                                             "--steps", "1000"] + common, log)
    return res


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--jobs", type=int)
    args = p.parse_args(argv)
    res = build(args.config, args.jobs, log=lambda m: print(m, file=sys.stderr, flush=True))
    print(res["dir"])


if __name__ == "__main__":
    main()
