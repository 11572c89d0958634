/**
 * Models view: own + public models with lineage breadcrumbs; owners can
 * toggle visibility and delete (with a confirm dialog that spells out the
 * purge: training jobs, their logs, and private lineage datasets go too).
 */

import { Api, ModelDoc } from './api.js';
import { clear, el, flash, fmtTime, statusChip } from './dom.js';

export interface ModelsViewDeps {
  api: Api;
  userId: () => string | null;
  /** Injectable for tests; window.confirm in the app. */
  confirmDialog?: (message: string) => boolean;
  onOpenPlayground?: (model: ModelDoc) => void;
}

export function deleteWarning(modelId: string): string {
  return (
    `Delete model ${modelId}? This permanently removes the model, ` +
    `its training jobs and their logs, and its private training datasets.`
  );
}

/** Breadcrumb links root -> ... -> self, one link per generation. */
export function lineageBreadcrumbs(model: ModelDoc): HTMLElement {
  const trail = el('span', { class: 'lineage' });
  const rootFirst = [...model.lineage].reverse();
  rootFirst.forEach((id, i) => {
    if (i > 0) trail.append(' › ');
    trail.append(
      el('a', {
        href: `#models/${id}`,
        class: id === model.model_id ? 'crumb crumb-self' : 'crumb',
        text: id,
      }),
    );
  });
  return trail;
}

export class ModelsView {
  private container: HTMLElement;
  private deps: ModelsViewDeps;

  constructor(container: HTMLElement, deps: ModelsViewDeps) {
    this.container = container;
    this.deps = deps;
  }

  async refresh(): Promise<void> {
    let models: ModelDoc[];
    try {
      models = (await this.deps.api.listModels()).models;
    } catch (err: any) {
      flash(`cannot load models: ${err.message}`, 'error');
      return;
    }
    clear(this.container);
    const table = el('table', { class: 'data-table', id: 'models-table' });
    table.append(
      el('tr', {}, [
        el('th', { text: 'model' }),
        el('th', { text: 'task' }),
        el('th', { text: 'status' }),
        el('th', { text: 'visibility' }),
        el('th', { text: 'lineage' }),
        el('th', { text: 'created' }),
        el('th', { text: 'actions' }),
      ]),
    );
    for (const model of models) table.append(this.row(model));
    this.container.append(el('h2', { text: 'Models' }), table);
  }

  private row(model: ModelDoc): HTMLTableRowElement {
    const mine = model.owner === this.deps.userId();
    const actions = el('td', { class: 'actions' });

    const tryBtn = el('button', {
      class: 'small',
      text: 'open in playground',
      click: () => this.deps.onOpenPlayground?.(model),
    });
    if (model.status === 'ready') actions.append(tryBtn);

    if (mine) {
      const nextVis = model.visibility === 'public' ? 'private' : 'public';
      actions.append(
        el('button', {
          class: 'small',
          'data-action': 'share',
          text: nextVis === 'public' ? 'share' : 'make private',
          click: async () => {
            try {
              await this.deps.api.setVisibility(model.model_id, nextVis);
              await this.refresh();
            } catch (err: any) {
              flash(`visibility change failed: ${err.message}`, 'error');
            }
          },
        }),
        el('button', {
          class: 'small danger',
          'data-action': 'delete',
          text: 'delete',
          click: async () => {
            const confirmDialog = this.deps.confirmDialog ?? ((m) => window.confirm(m));
            if (!confirmDialog(deleteWarning(model.model_id))) return;
            try {
              const res = await this.deps.api.deleteModel(model.model_id);
              flash(`deleted ${res.deleted.length} record(s)`);
              await this.refresh();
            } catch (err: any) {
              flash(`delete failed: ${err.message}`, 'error');
            }
          },
        }),
      );
    }

    const row = el('tr', { 'data-model-id': model.model_id }, [
      el('td', {}, [el('code', { text: model.model_id })]),
      el('td', { text: `${model.plugin_id}/${model.task_name}` }),
      el('td', {}, [
        statusChip(model.status),
        ...(model.failure_reason ? [el('div', { class: 'reason', text: model.failure_reason })] : []),
      ]),
      el('td', {}, [el('span', { class: `badge badge-${model.visibility}`, text: model.visibility })]),
      el('td', {}, [lineageBreadcrumbs(model)]),
      el('td', { text: fmtTime(model.created_at) }),
      actions,
    ]);
    return row;
  }
}
