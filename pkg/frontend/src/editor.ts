/**
 * Correction editor + fine-tune wizard.
 *
 * The editor is a side-by-side source/target page list that builds a
 * text_pairs_jsonl dataset in the browser; rows with an empty target are
 * rejected before anything is uploaded. The wizard picks a tunable base
 * model, attaches a dataset, launches the fine-tune, and shows live
 * progress (job status + child model status) polled from the server.
 *
 * For diarization, an enrollment builder turns embedding windows plus
 * speaker span annotations into an enrollment_json dataset.
 */

import { Api, DatasetDoc, ModelDoc, PluginDoc } from './api.js';
import { clear, el, flash, poll, statusChip } from './dom.js';

export interface PageRow {
  source: string;
  target: string;
}

/** Rows that would produce a malformed pair; empty rows at the end are ignored. */
export function invalidRows(rows: PageRow[]): number[] {
  const bad: number[] = [];
  rows.forEach((row, i) => {
    const blank = row.source === '' && row.target === '';
    if (!blank && row.target === '') bad.push(i);
  });
  return bad;
}

/** Serialize non-blank rows as one JSON object per line. */
export function buildPairsJsonl(rows: PageRow[]): string {
  return rows
    .filter((row) => !(row.source === '' && row.target === ''))
    .map((row) => JSON.stringify({ source: row.source, target: row.target }))
    .join('\n');
}

export interface AnnotationRow {
  speaker: string;
  start: number;
  end: number;
}

/** Build an enrollment_json document from a windows doc and labeled spans. */
export function buildEnrollmentJson(windowsDoc: unknown, annotations: AnnotationRow[]): string {
  return JSON.stringify({ windows: windowsDoc, annotations });
}

export class EditorView {
  private container: HTMLElement;
  private api: Api;
  private rows: PageRow[] = [{ source: '', target: '' }];
  private datasets: DatasetDoc[] = [];
  private tunable: ModelDoc[] = [];
  private plugins: PluginDoc[] = [];
  private progressPoll: { stop: () => void } | null = null;
  private lastDatasetId: string | null = null;

  constructor(container: HTMLElement, api: Api) {
    this.container = container;
    this.api = api;
  }

  stop(): void {
    this.progressPoll?.stop();
    this.progressPoll = null;
  }

  async refresh(): Promise<void> {
    try {
      const [modelsRes, datasetsRes, pluginsRes] = await Promise.all([
        this.api.listModels(),
        this.api.listDatasets(),
        this.api.listPlugins(),
      ]);
      this.plugins = pluginsRes.plugins;
      this.datasets = datasetsRes.datasets;
      this.tunable = modelsRes.models.filter(
        (m) => m.status === 'ready' && this.supportsFinetune(m),
      );
    } catch (err: any) {
      flash(`cannot load editor: ${err.message}`, 'error');
      return;
    }
    this.render();
  }

  private supportsFinetune(model: ModelDoc): boolean {
    const plugin = this.plugins.find((p) => p.plugin_id === model.plugin_id);
    const task = plugin?.tasks.find((t) => t.task_name === model.task_name);
    return task?.supports_finetune ?? false;
  }

  private render(): void {
    clear(this.container);
    this.container.append(
      el('h2', { text: 'Correct & Train' }),
      this.editorPane(),
      this.enrollmentPane(),
      this.wizardPane(),
      el('div', { id: 'train-progress' }),
    );
  }

  // ----- side-by-side correction editor

  private editorPane(): HTMLElement {
    const list = el('div', { id: 'page-rows' });
    this.rows.forEach((row, i) => {
      const source = el('textarea', {
        class: 'page-source',
        rows: '3',
        placeholder: 'source (what the system produced)',
        input: (e: Event) => {
          this.rows[i].source = (e.target as HTMLTextAreaElement).value;
        },
      }) as HTMLTextAreaElement;
      source.value = row.source;
      const target = el('textarea', {
        class: 'page-target',
        rows: '3',
        placeholder: 'target (the corrected text)',
        input: (e: Event) => {
          this.rows[i].target = (e.target as HTMLTextAreaElement).value;
        },
      }) as HTMLTextAreaElement;
      target.value = row.target;
      list.append(
        el('div', { class: 'page-row', 'data-row': String(i) }, [
          el('span', { class: 'page-num', text: `page ${i + 1}` }),
          source,
          target,
          el('button', {
            class: 'small danger',
            text: 'remove',
            click: () => {
              this.rows.splice(i, 1);
              if (this.rows.length === 0) this.rows.push({ source: '', target: '' });
              this.render();
            },
          }),
        ]),
      );
    });

    const taskName = el('input', {
      id: 'dataset-task-name',
      value: 'train',
      placeholder: 'training task name',
    }) as HTMLInputElement;

    return el('div', { class: 'editor-pane' }, [
      el('h3', { text: 'Correction editor' }),
      list,
      el('div', { class: 'form-row' }, [
        el('button', {
          id: 'add-page',
          text: 'add page',
          click: () => {
            this.rows.push({ source: '', target: '' });
            this.render();
          },
        }),
        el('label', { text: ' task ' }),
        taskName,
        el('button', {
          id: 'create-dataset',
          text: 'create dataset',
          click: async () => {
            const bad = invalidRows(this.rows);
            if (bad.length > 0) {
              flash(`page ${bad[0] + 1} has an empty target; fill it in or remove the page`, 'error');
              return;
            }
            const jsonl = buildPairsJsonl(this.rows);
            if (jsonl === '') {
              flash('add at least one corrected page', 'error');
              return;
            }
            try {
              const dataset = await this.api.uploadDataset('text_pairs_jsonl', taskName.value, jsonl);
              this.lastDatasetId = dataset.dataset_id;
              flash(`dataset ${dataset.dataset_id} created with ${dataset.item_count} page(s)`);
              await this.refresh();
            } catch (err: any) {
              flash(`dataset upload failed: ${err.message}`, 'error');
            }
          },
        }),
      ]),
    ]);
  }

  // ----- enrollment builder (diarization)

  private enrollmentPane(): HTMLElement {
    const windowsInput = el('textarea', {
      id: 'enroll-windows',
      rows: '3',
      placeholder: '{"dim": 16, "windows": [{"start": 0, "end": 1, "vec": [...]}, ...]}',
    }) as HTMLTextAreaElement;
    const spans = el('textarea', {
      id: 'enroll-annotations',
      rows: '3',
      placeholder: 'one per line: speaker,start,end (e.g. ana,0,2.5)',
    }) as HTMLTextAreaElement;
    return el('div', { class: 'editor-pane' }, [
      el('h3', { text: 'Speaker enrollment (diarization)' }),
      windowsInput,
      spans,
      el('button', {
        id: 'create-enrollment',
        text: 'create enrollment dataset',
        click: async () => {
          let windowsDoc: unknown;
          try {
            windowsDoc = JSON.parse(windowsInput.value);
          } catch {
            flash('windows must be valid JSON', 'error');
            return;
          }
          const annotations: AnnotationRow[] = [];
          for (const line of spans.value.split('\n')) {
            if (line.trim() === '') continue;
            const [speaker, start, end] = line.split(',').map((s) => s.trim());
            const startN = Number(start);
            const endN = Number(end);
            if (!speaker || !Number.isFinite(startN) || !Number.isFinite(endN)) {
              flash(`bad annotation line: ${line}`, 'error');
              return;
            }
            annotations.push({ speaker, start: startN, end: endN });
          }
          if (annotations.length === 0) {
            flash('add at least one speaker span', 'error');
            return;
          }
          try {
            const dataset = await this.api.uploadDataset(
              'enrollment_json',
              'enroll',
              buildEnrollmentJson(windowsDoc, annotations),
            );
            this.lastDatasetId = dataset.dataset_id;
            flash(`dataset ${dataset.dataset_id} created with ${dataset.item_count} annotation(s)`);
            await this.refresh();
          } catch (err: any) {
            flash(`enrollment upload failed: ${err.message}`, 'error');
          }
        },
      }),
    ]);
  }

  // ----- fine-tune wizard

  private wizardPane(): HTMLElement {
    const modelSelect = el('select', { id: 'wizard-model' }) as HTMLSelectElement;
    for (const model of this.tunable) {
      modelSelect.append(
        el('option', {
          value: model.model_id,
          text: `${model.model_id} (${model.plugin_id}/${model.task_name})`,
        }),
      );
    }
    const datasetSelect = el('select', { id: 'wizard-dataset' }) as HTMLSelectElement;
    for (const dataset of this.datasets) {
      datasetSelect.append(
        el('option', {
          value: dataset.dataset_id,
          text: `${dataset.dataset_id} (${dataset.format}, ${dataset.item_count} item(s))`,
        }),
      );
    }
    if (this.lastDatasetId) datasetSelect.value = this.lastDatasetId;

    return el('div', { class: 'editor-pane' }, [
      el('h3', { text: 'Fine-tune wizard' }),
      el('div', { class: 'form-row' }, [
        el('label', { text: 'base model ' }),
        modelSelect,
        el('label', { text: ' dataset ' }),
        datasetSelect,
        el('button', {
          id: 'launch-finetune',
          text: 'launch fine-tune',
          click: async () => {
            if (!modelSelect.value || !datasetSelect.value) {
              flash('pick a base model and a dataset', 'error');
              return;
            }
            try {
              const res = await this.api.finetune(modelSelect.value, datasetSelect.value);
              this.watchTraining(res.job_id, res.new_model_id);
            } catch (err: any) {
              flash(`fine-tune failed: ${err.message}`, 'error');
            }
          },
        }),
      ]),
    ]);
  }

  private renderProgress(jobId: string, jobStatus: string, model: ModelDoc): void {
    const pane = document.getElementById('train-progress');
    if (!pane) return;
    clear(pane);
    pane.append(
      el('div', { class: 'progress-card', id: 'training-status' }, [
        el('div', {}, [el('label', { text: 'job ' }), el('code', { text: jobId }), ' ', statusChip(jobStatus)]),
        el('div', {}, [
          el('label', { text: 'new model ' }),
          el('code', { text: model.model_id }),
          ' ',
          statusChip(model.status),
          ...(model.failure_reason ? [el('span', { class: 'reason', text: ` ${model.failure_reason}` })] : []),
        ]),
        el('a', { href: `#jobs/${jobId}`, text: 'watch logs in the jobs dashboard' }),
      ]),
    );
    if (model.status === 'ready') {
      pane.append(
        el('p', {
          id: 'training-done',
          text: `model ${model.model_id} is ready - fine-tune it again or open it in the playground`,
        }),
      );
    }
  }

  private watchTraining(jobId: string, modelId: string): void {
    this.progressPoll?.stop();
    this.progressPoll = poll(async () => {
      const [job, model] = await Promise.all([this.api.getJob(jobId), this.api.getModel(modelId)]);
      const done = model.status === 'ready' || model.status === 'failed';
      if (done) {
        this.progressPoll?.stop();
        // the new model is tunable too: refresh so relaunching grows the lineage
        await this.refresh();
      }
      this.renderProgress(jobId, job.status, model);
    });
  }
}
