# scripts/convert_amazon.py

import argparse
import logging
import sys
from pathlib import Path

sys.path.append(str(Path(__file__).parent.parent))

from arag.config import configure_logging
from arag.corpus import convert_amazon, write_jsonl
from arag.errors import CorpusError

logger = logging.getLogger(__name__)


def main(reviews_path: Path, meta_path: Path, out_dir: Path, max_item_reviews: int) -> None:
    """Convert one Amazon category (review dump + metadata dump) into catalog and interaction JSONL."""
    items, interactions, counts = convert_amazon(reviews_path, meta_path, max_item_reviews)
    catalog_digest = write_jsonl(out_dir / "catalog.jsonl", items)
    log_digest = write_jsonl(out_dir / "interactions.jsonl", interactions)
    logger.info(f"catalog.jsonl sha256={catalog_digest}")
    logger.info(f"interactions.jsonl sha256={log_digest}")
    logger.info(
        f"{counts['items']} items ({counts['items_without_title']} without title skipped), "
        f"{counts['interactions']} interactions ({counts['interactions_dropped']} dropped)"
    )


if __name__ == "__main__":
    configure_logging("convert_amazon.log")
    parser = argparse.ArgumentParser(description="Convert an Amazon review dump into arag input files")
    parser.add_argument("reviews", type=Path, help="reviews file, e.g. reviews_Clothing_Shoes_and_Jewelry_5.json.gz")
    parser.add_argument("meta", type=Path, help="metadata file, e.g. meta_Clothing_Shoes_and_Jewelry.json.gz")
    parser.add_argument("--out-dir", type=Path, default=Path("data/amazon"))
    parser.add_argument("--max-item-reviews", type=int, default=5)
    args = parser.parse_args()
    try:
        main(args.reviews, args.meta, args.out_dir, args.max_item_reviews)
    except CorpusError as e:
        logger.error(f"Conversion failed: {e}")
        sys.exit(2)
