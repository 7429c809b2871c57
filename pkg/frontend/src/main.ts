/**
 * Page wiring: query params pick the service, queue, and reviewer; one
 * ReviewSession and one ContextViewer drive the whole loop from the
 * keyboard (A accept / R reject / U undo / Z zoom).
 *
 *   index.html?api=http://127.0.0.1:8765&queue=tumor&reviewer=ana
 *
 * `api` defaults to same-origin, `queue` to the first queue the service
 * reports, `reviewer` to "reviewer".
 */

import { ApiClient, Candidate, QueueStats } from './api.js';
import { bindKeyboard } from './keyboard.js';
import { ReviewSession } from './session.js';
import { ContextViewer } from './viewer.js';

const PATCH_SIZE = 224;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing #${id}`);
  return node as T;
}

function fmtPatch(c: Candidate): string {
  return `${c.slide_id} @ (${c.x}, ${c.y}) ${c.size}px ${c.level}`;
}

async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const api = new ApiClient(params.get('api') ?? '');
  const reviewer = params.get('reviewer') ?? 'reviewer';

  const queues = await api.listQueues();
  if (queues.length === 0) {
    el('class-label').textContent = 'no queues on the service';
    return;
  }
  const queueId = params.get('queue') ?? queues[0].queue_id;

  const viewer = new ContextViewer(el('viewer'), PATCH_SIZE, () => {
    el('zoom-state').textContent = viewer.mode === 'fit' ? 'fit' : '1:1';
  });

  let stats: QueueStats | null = null;
  let statsTimer: ReturnType<typeof setTimeout> | null = null;
  const refreshStats = () => {
    if (statsTimer !== null) return;
    statsTimer = setTimeout(async () => {
      statsTimer = null;
      try {
        stats = await api.queueStats(queueId);
        render(session);
      } catch {
        // progress is cosmetic; the next ack retriggers it
      }
    }, 50);
  };

  let shownUrl: string | null = null;
  const render = (s: ReviewSession) => {
    el('class-label').textContent = queueId;
    el('counts').textContent =
      `${s.accepted} accepted / ${s.rejected} rejected` +
      (s.ratePerMinute() > 0 ? ` (${s.ratePerMinute().toFixed(0)}/min)` : '');
    if (stats !== null) {
      const decided = stats.accepted + stats.rejected;
      const total = decided + stats.pending;
      el('progress').textContent = `${decided} / ${total} decided`;
    }
    const sync = el('sync-state');
    if (!s.online) {
      sync.textContent = `offline, ${s.pendingCount()} decision(s) pending sync`;
      sync.className = 'bad';
    } else if (s.pendingCount() > 0) {
      sync.textContent = `syncing ${s.pendingCount()} decision(s)`;
      sync.className = 'warn';
    } else {
      sync.textContent = 'synced';
      sync.className = 'ok';
    }
    el('error').textContent = s.lastError ?? '';

    if (s.drained) {
      el('patch-info').textContent = 'queue drained, nothing left to review';
      viewer.clear();
      shownUrl = null;
    } else if (s.current !== null) {
      el('patch-info').textContent =
        `${fmtPatch(s.current)} | score ${s.current.score.toFixed(4)}`;
      const url = api.contextUrl(s.current);
      if (url !== shownUrl) {
        shownUrl = url;
        viewer.load(url);
      }
    } else {
      el('patch-info').textContent = s.pendingCount() > 0 ? 'posting...' : 'loading...';
    }
    refreshStats();
  };

  const session = new ReviewSession(api, queueId, reviewer, {
    onChange: render,
  });

  bindKeyboard(window, (action) => {
    switch (action) {
      case 'accept':
        void session.decide('accept');
        break;
      case 'reject':
        void session.decide('reject');
        break;
      case 'undo':
        void session.undo();
        break;
      case 'zoom':
        viewer.toggleZoom();
        break;
    }
  });
  window.addEventListener('resize', () => viewer.relayout());

  el('reviewer-name').textContent = reviewer;
  await session.start();
}

boot().catch((err) => {
  el('error').textContent = err instanceof Error ? err.message : String(err);
});
