# scripts/make_synthetic.py

import argparse
import logging
import sys
from pathlib import Path

sys.path.append(str(Path(__file__).parent.parent))

from arag.config import configure_logging
from arag.synthetic import write_synthetic

logger = logging.getLogger(__name__)

if __name__ == "__main__":
    configure_logging("make_synthetic.log")
    parser = argparse.ArgumentParser(description="Write a synthetic catalog and interaction log")
    parser.add_argument("--out-dir", type=Path, default=Path("data/synthetic"))
    parser.add_argument("--users", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    digests = write_synthetic(args.out_dir, args.users, args.seed)
    for name, digest in digests.items():
        logger.info(f"{name} sha256={digest}")
