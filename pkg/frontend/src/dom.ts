/** Small DOM construction helpers shared by all views. */

type Attrs = Record<string, string | boolean | EventListener>;

export function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Attrs = {},
  children: (Node | string)[] = [],
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (typeof value === 'function') {
      node.addEventListener(key, value);
    } else if (typeof value === 'boolean') {
      if (key in node) (node as any)[key] = value;
      else if (value) node.setAttribute(key, '');
    } else if (key === 'text') {
      node.textContent = value;
    } else {
      node.setAttribute(key, value);
    }
  }
  for (const child of children) {
    node.append(typeof child === 'string' ? document.createTextNode(child) : child);
  }
  return node;
}

export function clear(node: HTMLElement): void {
  while (node.firstChild) node.removeChild(node.firstChild);
}

export function fmtTime(epochMs: number): string {
  return new Date(epochMs).toISOString().replace('T', ' ').slice(0, 19);
}

/** Status chip with a per-status CSS class (styled in styles.css). */
export function statusChip(status: string): HTMLSpanElement {
  return el('span', { class: `chip chip-${status}`, text: status });
}

/**
 * Repeatedly run an async tick. The interval stretches to backoffMs while the
 * tab is hidden so background views poll gently. stop() ends the loop.
 */
export function poll(
  tick: () => Promise<void>,
  intervalMs = 1000,
  backoffMs = 5000,
): { stop: () => void } {
  let stopped = false;
  let timer: ReturnType<typeof setTimeout> | null = null;
  const run = async () => {
    if (stopped) return;
    try {
      await tick();
    } catch {
      // polling must survive transient errors; the next tick retries
    }
    if (stopped) return;
    timer = setTimeout(run, document.hidden ? backoffMs : intervalMs);
  };
  void run();
  return {
    stop: () => {
      stopped = true;
      if (timer !== null) clearTimeout(timer);
    },
  };
}

/** One-line notice area for errors and confirmations. */
export function flash(message: string, kind: 'info' | 'error' = 'info'): void {
  const box = document.getElementById('flash');
  if (!box) return;
  box.textContent = message;
  box.className = `flash flash-${kind}`;
  box.hidden = message === '';
}
