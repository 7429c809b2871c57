/**
 * Context image viewer: fit-to-viewport or pixel-exact 1:1, with the
 * central patch cell outlined. The server already bakes a hairline
 * highlight into the PNG; the viewer adds a screen-space outline that
 * scales with the zoom so the center stays obvious at any size.
 */

export type ZoomMode = 'fit' | 'actual';

export interface HighlightBox {
  left: number;
  top: number;
  size: number;
}

export interface ViewerLayout {
  scale: number;
  width: number;
  height: number;
  highlight: HighlightBox;
}

/**
 * Pure layout math. `natural` is the square image edge (2016 for a 9x9
 * review grid of 224px patches); the central cell starts at
 * ((grid-1)/2) * patch in image space and everything scales together.
 */
export function computeLayout(
  natural: number,
  patch: number,
  viewportW: number,
  viewportH: number,
  mode: ZoomMode,
): ViewerLayout {
  if (natural <= 0 || patch <= 0 || natural % patch !== 0) {
    throw new Error(`image edge ${natural} is not a multiple of patch ${patch}`);
  }
  const grid = natural / patch;
  if (grid % 2 !== 1) {
    throw new Error(`review grid ${grid} has no central cell`);
  }
  const scale = mode === 'fit'
    ? Math.min(viewportW / natural, viewportH / natural)
    : 1;
  const centerOrigin = ((grid - 1) / 2) * patch;
  return {
    scale,
    width: natural * scale,
    height: natural * scale,
    highlight: {
      left: centerOrigin * scale,
      top: centerOrigin * scale,
      size: patch * scale,
    },
  };
}

export class ContextViewer {
  mode: ZoomMode = 'fit';
  private url: string | null = null;
  private readonly image: HTMLImageElement;
  private readonly box: HTMLDivElement;
  private readonly placeholder: HTMLDivElement;

  constructor(
    private readonly container: HTMLElement,
    private readonly patchSize: number,
    private readonly onStateChange: () => void = () => {},
  ) {
    this.image = document.createElement('img');
    this.image.className = 'context-image';
    this.image.alt = 'review context';
    this.image.draggable = false;
    this.box = document.createElement('div');
    this.box.className = 'highlight-box';
    this.placeholder = document.createElement('div');
    this.placeholder.className = 'placeholder';
    const retry = document.createElement('button');
    retry.textContent = 'retry image';
    retry.addEventListener('click', () => this.reload());
    this.placeholder.append('context image failed to load ', retry);
    container.append(this.image, this.box, this.placeholder);
    this.image.addEventListener('load', () => {
      this.placeholder.style.display = 'none';
      this.image.style.visibility = 'visible';
      this.relayout();
    });
    this.image.addEventListener('error', () => {
      if (this.url !== null) this.placeholder.style.display = 'flex';
      this.image.style.visibility = 'hidden';
      this.box.style.display = 'none';
    });
  }

  load(url: string): void {
    this.url = url;
    this.placeholder.style.display = 'none';
    this.box.style.display = 'none';
    this.image.src = url;
  }

  clear(): void {
    this.url = null;
    this.image.removeAttribute('src');
    this.image.style.visibility = 'hidden';
    this.box.style.display = 'none';
    this.placeholder.style.display = 'none';
  }

  reload(): void {
    if (this.url !== null) {
      // cache-bust so a transient fetch failure is actually retried
      const sep = this.url.includes('?') ? '&' : '?';
      this.image.src = `${this.url}${sep}retry=${Date.now()}`;
    }
  }

  toggleZoom(): void {
    this.mode = this.mode === 'fit' ? 'actual' : 'fit';
    this.relayout();
    this.onStateChange();
  }

  relayout(): void {
    const natural = this.image.naturalWidth;
    if (!natural) return;
    const layout = computeLayout(
      natural,
      this.patchSize,
      this.container.clientWidth,
      this.container.clientHeight,
      this.mode,
    );
    this.image.style.width = `${layout.width}px`;
    this.image.style.height = `${layout.height}px`;
    this.box.style.display = 'block';
    this.box.style.left = `${layout.highlight.left}px`;
    this.box.style.top = `${layout.highlight.top}px`;
    this.box.style.width = `${layout.highlight.size}px`;
    this.box.style.height = `${layout.highlight.size}px`;
    // 1:1 pans via native scrolling; fit never overflows
    this.container.style.overflow = this.mode === 'actual' ? 'auto' : 'hidden';
  }
}
