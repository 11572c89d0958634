/** Test fixtures: a real backend subprocess and a jsdom mount of the shell. */

import { ChildProcess, execFileSync, spawn } from 'node:child_process';
import { mkdtempSync, readFileSync } from 'node:fs';
import net from 'node:net';
import { tmpdir } from 'node:os';
import { dirname, join } from 'node:path';
import { fileURLToPath } from 'node:url';

const FRONTEND_ROOT = dirname(dirname(fileURLToPath(import.meta.url)));

export const ADMIN_USER = 'admin';
export const ADMIN_PASS = 'admin-pw';

export function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = net.createServer();
    srv.listen(0, '127.0.0.1', () => {
      const address = srv.address();
      if (address && typeof address === 'object') {
        const port = address.port;
        srv.close(() => resolve(port));
      } else {
        srv.close(() => reject(new Error('no port assigned')));
      }
    });
  });
}

export class ServerFixture {
  proc: ChildProcess;
  url: string;
  dataDir: string;

  private constructor(proc: ChildProcess, url: string, dataDir: string) {
    this.proc = proc;
    this.url = url;
    this.dataDir = dataDir;
  }

  static async launch(opts: { inlineWorker: boolean }): Promise<ServerFixture> {
    const port = await freePort();
    const dataDir = mkdtempSync(join(tmpdir(), 'annolab-ui-'));
    const args = [
      '-m',
      'annolab',
      'serve',
      '--data-dir',
      dataDir,
      '--addr',
      `127.0.0.1:${port}`,
      '--bootstrap-admin',
      `${ADMIN_USER}:${ADMIN_PASS}`,
    ];
    if (opts.inlineWorker) args.push('--inline-worker');
    const proc = spawn('python3', args, { stdio: 'ignore' });
    const url = `http://127.0.0.1:${port}`;
    const deadline = Date.now() + 45_000;
    while (Date.now() < deadline) {
      if (proc.exitCode !== null) throw new Error(`serve exited early with ${proc.exitCode}`);
      try {
        await fetch(`${url}/api/meta`);
        return new ServerFixture(proc, url, dataDir);
      } catch {
        await new Promise((r) => setTimeout(r, 100));
      }
    }
    proc.kill('SIGKILL');
    throw new Error('serve did not answer /api/meta in time');
  }

  stop(): void {
    if (this.proc.exitCode === null) this.proc.kill('SIGKILL');
  }

  /** Run `annolab client jobs-tail` and return its raw stdout bytes. */
  cliJobsTail(jobId: string, token: string): Buffer {
    return execFileSync('annolab', ['client', 'jobs-tail', jobId], {
      env: { ...process.env, ANNOLAB_SERVER: this.url, ANNOLAB_TOKEN: token },
    });
  }
}

/** Put the app shell (public/index.html body, sans script tag) into jsdom. */
export function mountShell(): void {
  const html = readFileSync(join(FRONTEND_ROOT, 'public', 'index.html'), 'utf-8');
  const body = html.match(/<body[^>]*>([\s\S]*)<\/body>/)![1];
  document.body.innerHTML = body.replace(/<script[\s\S]*?<\/script>/, '');
  localStorage.clear();
  location.hash = '';
}

/**
 * The documented REST surface. The UI must never call anything else; the
 * fetch proxy below enforces it for every request a test triggers.
 */
export const DOCUMENTED_ROUTES: RegExp[] = [
  /^\/api\/auth\/token$/,
  /^\/api\/users$/,
  /^\/api\/models$/,
  /^\/api\/models\/[^/]+$/,
  /^\/api\/models\/[^/]+\/predict$/,
  /^\/api\/models\/[^/]+\/finetune$/,
  /^\/api\/datasets$/,
  /^\/api\/datasets\/[^/]+$/,
  /^\/api\/jobs$/,
  /^\/api\/jobs\/[^/]+$/,
  /^\/api\/jobs\/[^/]+\/logs$/,
  /^\/api\/jobs\/[^/]+\/result$/,
  /^\/api\/jobs\/[^/]+\/cancel$/,
  /^\/api\/jobs\/[^/]+\/restart$/,
  /^\/api\/plugins$/,
  /^\/api\/queue\/stats$/,
  /^\/api\/meta$/,
];

export interface FetchRecorder {
  /** Every request as "METHOD /path". */
  seen: string[];
  undocumented: string[];
  restore: () => void;
  count: (prefix: string) => number;
}

/** Wrap global fetch; record every request and flag any undocumented route. */
export function recordFetches(): FetchRecorder {
  const original = globalThis.fetch;
  const recorder: FetchRecorder = {
    seen: [],
    undocumented: [],
    restore: () => {
      globalThis.fetch = original;
    },
    count: (prefix: string) => recorder.seen.filter((s) => s.startsWith(prefix)).length,
  };
  globalThis.fetch = ((input: any, init?: any) => {
    const url = typeof input === 'string' ? input : input.url;
    const method = (init?.method ?? (typeof input === 'object' && input.method) ?? 'GET').toUpperCase();
    const path = new URL(url, 'http://x').pathname;
    recorder.seen.push(`${method} ${path}`);
    if (!DOCUMENTED_ROUTES.some((re) => re.test(path))) recorder.undocumented.push(path);
    return original(input, init);
  }) as typeof fetch;
  return recorder;
}

export function sleep(ms: number): Promise<void> {
  return new Promise((r) => setTimeout(r, ms));
}

/** Poll until cond() is true or the deadline passes; throws on timeout. */
export async function waitFor(cond: () => boolean | Promise<boolean>, timeoutMs = 30_000, what = 'condition'): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (await cond()) return;
    await sleep(100);
  }
  throw new Error(`timed out waiting for ${what}`);
}
