/**
 * Jobs dashboard: a polled job table with status chips and a detail pane
 * that tails the selected job's logs by byte offset (1 s interval),
 * autoscrolls, and offers cancel/restart exactly where the server-side
 * state machine allows them. Everything shown is polled GET state.
 */

import { Api, JobDoc, JobStatus, b64decode } from './api.js';
import { clear, el, flash, fmtTime, poll, statusChip } from './dom.js';

/** Cancel is legal while the job is queued or running. */
export function cancelEnabled(status: JobStatus): boolean {
  return status === 'queued' || status === 'running';
}

/** Restart is legal once the job has failed or been cancelled. */
export function restartEnabled(status: JobStatus): boolean {
  return status === 'failed' || status === 'cancelled';
}

/**
 * Accumulates log chunks from the offset-polling endpoint. The reconstruction
 * is byte-faithful: chunks are kept as bytes and decoded over the whole
 * buffer, so the text equals what `client jobs-tail` writes to stdout.
 */
export class LogTail {
  offset = 0;
  finished = false;
  private chunks: Uint8Array[] = [];

  async tick(api: Api, jobId: string): Promise<boolean> {
    const chunk = await api.jobLogs(jobId, this.offset);
    const bytes = b64decode(chunk.payload_b64);
    if (bytes.length > 0) this.chunks.push(bytes);
    this.offset = chunk.next_offset;
    this.finished = chunk.finished;
    return bytes.length > 0;
  }

  bytes(): Uint8Array {
    const total = this.chunks.reduce((n, c) => n + c.length, 0);
    const out = new Uint8Array(total);
    let at = 0;
    for (const chunk of this.chunks) {
      out.set(chunk, at);
      at += chunk.length;
    }
    return out;
  }

  text(): string {
    return new TextDecoder().decode(this.bytes());
  }
}

export class JobsView {
  private container: HTMLElement;
  private api: Api;
  private tablePoll: { stop: () => void } | null = null;
  private detailPoll: { stop: () => void } | null = null;
  private openJobId: string | null = null;
  private tail: LogTail | null = null;
  private intervalMs: number;

  constructor(container: HTMLElement, api: Api, intervalMs = 1000) {
    this.container = container;
    this.api = api;
    this.intervalMs = intervalMs;
  }

  start(openJobId?: string): void {
    this.stop();
    clear(this.container);
    this.container.append(
      el('h2', { text: 'Jobs' }),
      el('div', { id: 'jobs-table-wrap' }),
      el('div', { id: 'job-detail' }),
    );
    this.tablePoll = poll(() => this.refreshTable(), this.intervalMs);
    if (openJobId) this.open(openJobId);
  }

  stop(): void {
    this.tablePoll?.stop();
    this.detailPoll?.stop();
    this.tablePoll = null;
    this.detailPoll = null;
    this.openJobId = null;
    this.tail = null;
  }

  private async refreshTable(): Promise<void> {
    const wrap = document.getElementById('jobs-table-wrap');
    if (!wrap) return;
    const jobs = (await this.api.listJobs()).jobs;
    const table = el('table', { class: 'data-table', id: 'jobs-table' });
    table.append(
      el('tr', {}, [
        el('th', { text: 'job' }),
        el('th', { text: 'kind' }),
        el('th', { text: 'task' }),
        el('th', { text: 'status' }),
        el('th', { text: 'attempt' }),
        el('th', { text: 'submitted' }),
      ]),
    );
    for (const job of jobs) {
      table.append(
        el(
          'tr',
          {
            'data-job-id': job.job_id,
            class: job.job_id === this.openJobId ? 'selected' : '',
            click: () => this.open(job.job_id),
          },
          [
            el('td', {}, [el('code', { text: job.job_id })]),
            el('td', { text: job.kind }),
            el('td', { text: `${job.plugin_id}/${job.task_name}` }),
            el('td', {}, [statusChip(job.status)]),
            el('td', { text: `${job.attempt}/${job.max_attempts}` }),
            el('td', { text: fmtTime(job.submitted_at) }),
          ],
        ),
      );
    }
    clear(wrap);
    wrap.append(table);
  }

  open(jobId: string): void {
    this.detailPoll?.stop();
    this.openJobId = jobId;
    // The poll closure binds this exact tail: a stale in-flight tick from a
    // previous open() can never append to the successor's buffer.
    const tail = new LogTail();
    this.tail = tail;
    const pane = document.getElementById('job-detail');
    if (!pane) return;
    clear(pane);
    const meta = el('div', { id: 'job-meta' });
    const logBox = el('pre', { id: 'log-output', class: 'log-output' });
    pane.append(el('h3', {}, [el('code', { text: jobId })]), meta, logBox);

    this.detailPoll = poll(async () => {
      let job: JobDoc;
      try {
        job = await this.api.getJob(jobId);
      } catch (err: any) {
        if (err?.status === 404) {
          clear(meta);
          meta.append(el('p', { class: 'reason', id: 'job-not-found', text: 'job not found (deleted?)' }));
          this.detailPoll?.stop();
        }
        return;
      }
      this.renderMeta(meta, job);
      const grew = await tail.tick(this.api, jobId);
      if (grew) {
        logBox.textContent = tail.text();
        logBox.scrollTop = logBox.scrollHeight; // autoscroll to the newest line
      }
    }, this.intervalMs);
  }

  /** Exposed for tests: the tail text currently shown for the open job. */
  tailText(): string {
    return this.tail?.text() ?? '';
  }

  private renderMeta(meta: HTMLElement, job: JobDoc): void {
    clear(meta);
    const cancelBtn = el('button', {
      id: 'job-cancel',
      text: 'cancel',
      disabled: !cancelEnabled(job.status),
      click: async () => {
        try {
          await this.api.cancelJob(job.job_id);
        } catch (err: any) {
          flash(`cancel failed: ${err.message}`, 'error');
        }
      },
    }) as HTMLButtonElement;
    const restartBtn = el('button', {
      id: 'job-restart',
      text: 'restart',
      disabled: !restartEnabled(job.status),
      click: async () => {
        try {
          await this.api.restartJob(job.job_id);
        } catch (err: any) {
          flash(`restart failed: ${err.message}`, 'error');
        }
      },
    }) as HTMLButtonElement;
    meta.append(
      el('div', { class: 'job-state' }, [
        statusChip(job.status),
        ` attempt ${job.attempt}/${job.max_attempts} `,
        ...(job.cancel_requested ? [el('span', { class: 'badge', text: 'cancel requested' })] : []),
        ...(job.failure_reason ? [el('span', { class: 'reason', text: ` ${job.failure_reason}` })] : []),
      ]),
      el('div', { class: 'actions' }, [cancelBtn, restartBtn]),
    );
  }
}
