/**
 * Hotkeys for the review loop: A=accept, R=reject, U=undo, Z=zoom.
 *
 * Bindings ignore modified keys and keystrokes aimed at form fields, so
 * typing a reviewer name never fires verdicts.
 */

export type Action = 'accept' | 'reject' | 'undo' | 'zoom';

export const KEYMAP: Record<string, Action> = {
  a: 'accept',
  r: 'reject',
  u: 'undo',
  z: 'zoom',
};

interface KeyLike {
  key: string;
  altKey?: boolean;
  ctrlKey?: boolean;
  metaKey?: boolean;
  target?: EventTarget | null;
}

const FIELD_TAGS = new Set(['INPUT', 'TEXTAREA', 'SELECT']);

export function actionForKey(event: KeyLike): Action | null {
  if (event.altKey || event.ctrlKey || event.metaKey) return null;
  const target = event.target as { tagName?: string; isContentEditable?: boolean } | null;
  if (target?.tagName !== undefined && FIELD_TAGS.has(target.tagName)) return null;
  if (target?.isContentEditable) return null;
  return KEYMAP[event.key.toLowerCase()] ?? null;
}

/** Attach a keydown handler; returns the detach function. */
export function bindKeyboard(
  element: { addEventListener: Function; removeEventListener: Function },
  handler: (action: Action) => void,
): () => void {
  const listener = (event: KeyboardEvent) => {
    const action = actionForKey(event);
    if (action !== null) {
      event.preventDefault();
      handler(action);
    }
  };
  element.addEventListener('keydown', listener);
  return () => element.removeEventListener('keydown', listener);
}
