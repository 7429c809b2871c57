"""Scripted reviewer: drain every queue through the verification service.

Stands in for the human verification step in demos and smoke tests. It
drives the same lease/decide machinery the HTTP API uses (next candidate,
post verdict, repeat), so the decision log it leaves behind is
indistinguishable from an interactive session's.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from spider.curation import load_queue
from spider.verifysvc import DecisionLog, VerifyService

DEFAULT_LOG = "decisions.log"  # matches the CLI's default so compile finds it


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--queues", required=True, help="directory of queue .jsonl files")
    ap.add_argument("--log", default=None, help=f"decision log (default <queues>/{DEFAULT_LOG})")
    ap.add_argument("--reviewer", default="autoreviewer")
    ap.add_argument("--accept-prob", type=float, default=1.0,
                    help="probability a candidate is accepted (default accept all)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    queues_dir = Path(args.queues)
    log_path = Path(args.log) if args.log else queues_dir / DEFAULT_LOG
    queues = {}
    for path in sorted(queues_dir.glob("*.jsonl")):
        if path.name == log_path.name:
            continue
        queue = load_queue(path)
        queues[queue.class_label] = queue
    if not queues:
        ap.error(f"no queue files in {queues_dir}")

    service = VerifyService(queues, DecisionLog(log_path))
    rng = np.random.default_rng(args.seed)
    for queue_id in sorted(queues):
        accepted = rejected = 0
        while True:
            cand = service.next_candidate(queue_id, args.reviewer)
            if cand is None:
                break
            verdict = "accept" if rng.random() < args.accept_prob else "reject"
            service.post_decision(cand.patch, queue_id, verdict, args.reviewer)
            accepted += verdict == "accept"
            rejected += verdict == "reject"
        print(f"{queue_id}: {accepted} accepted, {rejected} rejected -> {log_path}")
    service.log.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
