/**
 * Review session state machine.
 *
 * All operations run on a single promise chain, so decisions post in
 * keypress order and "next" is fetched only after the decision that
 * precedes it is acknowledged (the server re-serves an undecided leased
 * candidate, so fetching earlier would just show the same patch again).
 *
 * Failed posts stay in an offline retry queue and are retried with
 * backoff; counters move only when the server acknowledges a POST, never
 * optimistically. Undo re-posts the opposite verdict for the last
 * acknowledged decision and relies on the server's last-write-wins fold.
 */

import {
  ApiClient,
  ApiError,
  Candidate,
  DecisionAck,
  Verdict,
  decisionBody,
} from './api.js';

export interface SessionOptions {
  /** base delay between offline retries, doubled up to 30x (ms) */
  retryDelayMs?: number;
  /** called after every observable state change */
  onChange?: (session: ReviewSession) => void;
  /** injected clock for tests */
  now?: () => number;
}

interface PendingPost {
  body: ReturnType<typeof decisionBody>;
  /** for undo posts, the verdict being reversed (counters move both ways) */
  undoes: Verdict | null;
  attempts: number;
}

interface LastDecision {
  candidate: Candidate;
  verdict: Verdict;
}

const MAX_BACKOFF_FACTOR = 30;

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

export class ReviewSession {
  current: Candidate | null = null;
  drained = false;
  accepted = 0;
  rejected = 0;
  online = true;
  /** sticky description of the last server rejection, if any */
  lastError: string | null = null;

  private chain: Promise<void> = Promise.resolve();
  private pending: PendingPost[] = [];
  private lastDecision: LastDecision | null = null;
  private leaseTtlMs: number | null = null;
  private leaseTimer: ReturnType<typeof setTimeout> | null = null;
  private firstAckAt: number | null = null;
  private readonly retryDelayMs: number;
  private readonly onChange: (session: ReviewSession) => void;
  private readonly now: () => number;

  constructor(
    private api: ApiClient,
    readonly queueId: string,
    readonly reviewer: string,
    options: SessionOptions = {},
  ) {
    this.retryDelayMs = options.retryDelayMs ?? 1000;
    this.onChange = options.onChange ?? (() => {});
    this.now = options.now ?? (() => Date.now());
  }

  /** Fetch the first candidate. */
  start(): Promise<void> {
    return this.enqueue(() => this.fetchNext());
  }

  /** Post a verdict for the current candidate, then advance. */
  decide(verdict: Verdict): Promise<void> {
    return this.enqueue(async () => {
      if (this.current === null) return;
      const candidate = this.current;
      this.current = null;
      this.clearLeaseTimer();
      this.pending.push({
        body: decisionBody(candidate, verdict, this.reviewer),
        undoes: null,
        attempts: 0,
      });
      this.notify();
      const acked = await this.flushPending();
      if (acked) this.lastDecision = { candidate, verdict };
      await this.fetchNext();
    });
  }

  /** Reverse the last acknowledged decision (single-level). */
  undo(): Promise<void> {
    return this.enqueue(async () => {
      const last = this.lastDecision;
      if (last === null) return;
      this.lastDecision = null;
      const opposite: Verdict = last.verdict === 'accept' ? 'reject' : 'accept';
      this.pending.push({
        body: decisionBody(last.candidate, opposite, this.reviewer),
        undoes: last.verdict,
        attempts: 0,
      });
      this.notify();
      await this.flushPending();
    });
  }

  /** Resolves when every queued operation so far has settled. */
  settled(): Promise<void> {
    return this.chain;
  }

  canUndo(): boolean {
    return this.lastDecision !== null;
  }

  pendingCount(): number {
    return this.pending.length;
  }

  decidedCount(): number {
    return this.accepted + this.rejected;
  }

  /** Acknowledged decisions per minute since the first ack. */
  ratePerMinute(): number {
    if (this.firstAckAt === null) return 0;
    const minutes = (this.now() - this.firstAckAt) / 60000;
    return minutes > 0 ? this.decidedCount() / minutes : 0;
  }

  private enqueue(op: () => Promise<void>): Promise<void> {
    const run = async () => {
      try {
        await op();
      } catch (err) {
        this.lastError = err instanceof Error ? err.message : String(err);
        this.notify();
      }
    };
    this.chain = this.chain.then(run);
    return this.chain;
  }

  /**
   * Post queued decisions in order. Network failures back off and retry
   * forever (the queue survives); HTTP errors are the server refusing the
   * payload, so the item is dropped and surfaced instead of retried.
   * Returns true when the final queued post was acknowledged.
   */
  private async flushPending(): Promise<boolean> {
    let lastAcked = false;
    while (this.pending.length > 0) {
      const item = this.pending[0];
      let ack: DecisionAck;
      try {
        ack = await this.api.postDecision(item.body);
      } catch (err) {
        if (err instanceof ApiError) {
          this.pending.shift();
          this.lastError = err.message;
          lastAcked = false;
          this.notify();
          continue;
        }
        item.attempts += 1;
        this.online = false;
        this.notify();
        const factor = Math.min(item.attempts, MAX_BACKOFF_FACTOR);
        await sleep(this.retryDelayMs * factor);
        continue;
      }
      this.pending.shift();
      this.online = true;
      this.applyAck(item, ack);
      lastAcked = true;
      this.notify();
    }
    return lastAcked;
  }

  private applyAck(item: PendingPost, _ack: DecisionAck): void {
    if (this.firstAckAt === null) this.firstAckAt = this.now();
    if (item.undoes === null) {
      if (item.body.verdict === 'accept') this.accepted += 1;
      else this.rejected += 1;
    } else {
      // flip: the patch's effective verdict changed sides
      if (item.undoes === 'accept') {
        this.accepted -= 1;
        this.rejected += 1;
      } else {
        this.rejected -= 1;
        this.accepted += 1;
      }
    }
  }

  /**
   * Fetch the next candidate, retrying network failures with backoff.
   * HTTP errors (unknown queue) are fatal for the operation and surface
   * via lastError.
   */
  private async fetchNext(): Promise<void> {
    let attempts = 0;
    for (;;) {
      try {
        const res = await this.api.nextCandidate(this.queueId, this.reviewer);
        this.online = true;
        this.drained = res.drained;
        this.current = res.candidate;
        this.leaseTtlMs =
          res.lease_ttl !== undefined ? res.lease_ttl * 1000 : null;
        this.scheduleLeaseRefresh();
        this.notify();
        return;
      } catch (err) {
        if (err instanceof ApiError) throw err;
        attempts += 1;
        this.online = false;
        this.notify();
        await sleep(this.retryDelayMs * Math.min(attempts, MAX_BACKOFF_FACTOR));
      }
    }
  }

  /** When the lease lapses undecided, silently re-fetch the candidate. */
  private scheduleLeaseRefresh(): void {
    this.clearLeaseTimer();
    if (this.current === null || this.leaseTtlMs === null) return;
    this.leaseTimer = setTimeout(() => {
      void this.enqueue(async () => {
        if (this.current !== null) await this.fetchNext();
      });
    }, this.leaseTtlMs);
  }

  private clearLeaseTimer(): void {
    if (this.leaseTimer !== null) {
      clearTimeout(this.leaseTimer);
      this.leaseTimer = null;
    }
  }

  private notify(): void {
    this.onChange(this);
  }
}
