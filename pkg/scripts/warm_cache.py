"""Pretrain and cache the world models for the given presets (first run only; later runs load from disk)."""

import argparse
import logging
import time

from realign.config import PRESETS, Pipeline, preset


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("presets", nargs="*", default=["toy", "points"], choices=sorted(PRESETS))
    parser.add_argument("--cache-dir", help="override REALIGN_CACHE")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    for name in args.presets:
        cfg = preset(name)
        cfg.cache_dir = args.cache_dir
        world = Pipeline(cfg).world
        start = time.perf_counter()
        _ = world.base
        if cfg.world.kind == "images":
            _ = world.weak
        print(f"{name}: world {cfg.world.pretrain_digest()} ready in {time.perf_counter() - start:.1f}s")


if __name__ == "__main__":
    main()
