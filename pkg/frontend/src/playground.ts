/**
 * Predict playground: pick a ready model, give it input, watch the job.
 * Text tasks get a text-in/text-out pane; audio tasks get a WAV upload and
 * a colored segment timeline. Failed jobs show the failure reason and a
 * restart button. All progress is polled server state, nothing invented.
 */

import { Api, JobDoc, ModelDoc, PluginDoc, b64encode } from './api.js';
import { clear, el, flash, poll, statusChip } from './dom.js';

export interface Segment {
  label: string;
  start: number;
  end: number;
  score: number;
}

/** Stable color per speaker label. */
export function labelColor(label: string): string {
  if (label === 'unknown') return 'hsl(0, 0%, 62%)';
  let hash = 0;
  for (let i = 0; i < label.length; i++) hash = (hash * 31 + label.charCodeAt(i)) >>> 0;
  return `hsl(${hash % 360}, 65%, 52%)`;
}

/**
 * Render segments as proportional, labeled, non-overlapping bars.
 * Widths are percentages of the total span so the timeline is responsive.
 */
export function renderSegments(segments: Segment[]): HTMLElement {
  const wrap = el('div', { class: 'timeline', id: 'segment-timeline' });
  if (segments.length === 0) {
    wrap.append(el('p', { text: 'no segments' }));
    return wrap;
  }
  const t0 = segments[0].start;
  const t1 = segments[segments.length - 1].end;
  const span = Math.max(t1 - t0, 1e-9);
  for (const seg of segments) {
    const left = ((seg.start - t0) / span) * 100;
    const width = ((seg.end - seg.start) / span) * 100;
    wrap.append(
      el(
        'div',
        {
          class: 'segment',
          'data-label': seg.label,
          style: `left:${left.toFixed(3)}%;width:${width.toFixed(3)}%;background:${labelColor(seg.label)}`,
          title: `${seg.label} ${seg.start}s-${seg.end}s (score ${seg.score.toFixed(3)})`,
        },
        [el('span', { class: 'segment-label', text: seg.label })],
      ),
    );
  }
  const legendLabels = [...new Set(segments.map((s) => s.label))];
  const legend = el('div', { class: 'legend' });
  for (const label of legendLabels) {
    legend.append(
      el('span', { class: 'legend-item' }, [
        el('span', { class: 'swatch', style: `background:${labelColor(label)}` }),
        label,
      ]),
    );
  }
  return el('div', {}, [wrap, legend]);
}

export class PlaygroundView {
  private container: HTMLElement;
  private api: Api;
  private models: ModelDoc[] = [];
  private plugins: PluginDoc[] = [];
  private selected: ModelDoc | null = null;
  private jobPoll: { stop: () => void } | null = null;

  constructor(container: HTMLElement, api: Api) {
    this.container = container;
    this.api = api;
  }

  stop(): void {
    this.jobPoll?.stop();
    this.jobPoll = null;
  }

  inputKindOf(model: ModelDoc): string {
    const plugin = this.plugins.find((p) => p.plugin_id === model.plugin_id);
    const task = plugin?.tasks.find((t) => t.task_name === model.task_name);
    return task?.input_kind ?? 'text_lines';
  }

  async refresh(preselect?: ModelDoc): Promise<void> {
    try {
      [this.models, this.plugins] = await Promise.all([
        this.api.listModels().then((r) => r.models.filter((m) => m.status === 'ready')),
        this.api.listPlugins().then((r) => r.plugins),
      ]);
    } catch (err: any) {
      flash(`cannot load playground: ${err.message}`, 'error');
      return;
    }
    if (preselect) this.selected = preselect;
    if (!this.selected && this.models.length > 0) this.selected = this.models[0];
    this.render();
  }

  private render(): void {
    this.jobPoll?.stop();
    clear(this.container);
    const select = el('select', {
      id: 'playground-model',
      change: () => {
        this.selected = this.models.find((m) => m.model_id === select.value) ?? null;
        this.render();
      },
    }) as HTMLSelectElement;
    for (const model of this.models) {
      select.append(
        el('option', {
          value: model.model_id,
          text: `${model.model_id} (${model.plugin_id}/${model.task_name})`,
        }),
      );
    }
    if (this.selected) select.value = this.selected.model_id;

    const output = el('div', { id: 'playground-output', class: 'output-pane' });
    const inputArea = this.selected ? this.inputPane(this.selected, output) : el('p', { text: 'no ready models' });

    this.container.append(
      el('h2', { text: 'Predict playground' }),
      el('div', { class: 'form-row' }, [el('label', { text: 'model ' }), select]),
      inputArea,
      output,
    );
  }

  private inputPane(model: ModelDoc, output: HTMLElement): HTMLElement {
    const kind = this.inputKindOf(model);
    if (kind === 'wav_audio') {
      const file = el('input', { type: 'file', accept: '.wav,audio/wav', id: 'playground-audio' }) as HTMLInputElement;
      const run = el('button', {
        id: 'playground-run',
        text: 'diarize audio',
        click: async () => {
          const chosen = file.files?.[0];
          if (!chosen) {
            flash('choose a WAV file first', 'error');
            return;
          }
          const bytes = new Uint8Array(await chosen.arrayBuffer());
          await this.submit(model, { inline_input_b64: b64encode(bytes) }, output);
        },
      });
      return el('div', { class: 'form-col' }, [file, run]);
    }
    // text_lines, embedding_windows and anything else: text in, text out
    const input = el('textarea', {
      id: 'playground-input',
      rows: '6',
      placeholder: kind === 'embedding_windows' ? '{"windows": [...]}' : 'text to process',
    }) as HTMLTextAreaElement;
    const run = el('button', {
      id: 'playground-run',
      text: 'run prediction',
      click: async () => {
        await this.submit(model, { inline_input: input.value }, output);
      },
    });
    return el('div', { class: 'form-col' }, [input, run]);
  }

  private async submit(
    model: ModelDoc,
    input: { inline_input?: string; inline_input_b64?: string },
    output: HTMLElement,
  ): Promise<void> {
    let jobId: string;
    try {
      jobId = (await this.api.predict(model.model_id, input)).job_id;
    } catch (err: any) {
      flash(`predict failed: ${err.message}`, 'error');
      return;
    }
    this.watchJob(model, jobId, output);
  }

  private watchJob(model: ModelDoc, jobId: string, output: HTMLElement): void {
    this.jobPoll?.stop();
    this.jobPoll = poll(async () => {
      const job = await this.api.getJob(jobId);
      this.renderJobState(model, job, output);
      if (job.status === 'succeeded' || job.status === 'failed' || job.status === 'cancelled') {
        this.jobPoll?.stop();
        if (job.status === 'succeeded') await this.renderResult(model, job, output);
      }
    });
  }

  private renderJobState(model: ModelDoc, job: JobDoc, output: HTMLElement): void {
    clear(output);
    const header = el('div', { class: 'job-state' }, [
      el('code', { text: job.job_id }),
      ' ',
      statusChip(job.status),
    ]);
    output.append(header);
    if (job.status === 'failed') {
      output.append(
        el('p', { class: 'reason', id: 'playground-failure', text: job.failure_reason ?? 'unknown failure' }),
        el('button', {
          id: 'playground-restart',
          text: 'restart',
          click: async () => {
            try {
              await this.api.restartJob(job.job_id);
              this.watchJob(model, job.job_id, output);
            } catch (err: any) {
              flash(`restart failed: ${err.message}`, 'error');
            }
          },
        }),
      );
    }
  }

  private async renderResult(model: ModelDoc, job: JobDoc, output: HTMLElement): Promise<void> {
    let bytes: Uint8Array;
    try {
      bytes = await this.api.jobResult(job.job_id);
    } catch (err: any) {
      flash(`cannot fetch result: ${err.message}`, 'error');
      return;
    }
    const text = new TextDecoder().decode(bytes);
    const kind = this.inputKindOf(model);
    if (kind === 'wav_audio' || kind === 'embedding_windows') {
      try {
        const segments = JSON.parse(text) as Segment[];
        output.append(renderSegments(segments));
        return;
      } catch {
        // fall through to plain text if the result is not segments JSON
      }
    }
    output.append(el('pre', { id: 'playground-result', text }));
  }
}
