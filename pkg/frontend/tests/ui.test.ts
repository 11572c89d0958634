// @vitest-environment jsdom
/**
 * Scripted browser test against a real backend subprocess: drives the
 * correction editor, the fine-tune wizard, and the jobs dashboard through
 * the DOM, then checks the UI's log tail byte-matches `client jobs-tail`
 * and that cancel/restart buttons follow the job state table exactly.
 * A fetch proxy asserts the UI only ever touches documented routes.
 */

import { afterAll, beforeAll, expect, test } from 'vitest';

import { App } from '../src/main.js';
import {
  ADMIN_PASS,
  ADMIN_USER,
  FetchRecorder,
  ServerFixture,
  mountShell,
  recordFetches,
  sleep,
  waitFor,
} from './fixture.js';

let server: ServerFixture; // with inline worker: jobs actually run
let idle: ServerFixture; // no worker: jobs stay queued for live-state checks
let recorder: FetchRecorder;
let app: App;
let confirmAnswer = true;
let lastConfirmMessage = '';

let datasetId = '';
let trainJobId = '';
let childModelId = '';
let grandchildModelId = '';

const BASE_TRANSLATE = 'm_base_stub-translate_translate';

beforeAll(async () => {
  [server, idle] = await Promise.all([
    ServerFixture.launch({ inlineWorker: true }),
    ServerFixture.launch({ inlineWorker: false }),
  ]);
  recorder = recordFetches();
}, 120_000);

afterAll(() => {
  recorder?.restore();
  app?.destroy();
  server?.stop();
  idle?.stop();
});

function byId<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function setValue(node: HTMLTextAreaElement | HTMLInputElement, value: string): void {
  node.value = value;
  node.dispatchEvent(new Event('input'));
}

function flashText(): string {
  return document.getElementById('flash')?.textContent ?? '';
}

test('login form exchanges credentials for a session token', async () => {
  mountShell();
  app = new App({
    apiBase: server.url,
    confirmDialog: (message) => {
      lastConfirmMessage = message;
      return confirmAnswer;
    },
  });
  setValue(byId<HTMLInputElement>('login-username'), ADMIN_USER);
  setValue(byId<HTMLInputElement>('login-password'), ADMIN_PASS);
  await app.login();
  expect(app.api.token).toMatch(/^[0-9a-f]{64}$/);
  expect(byId('login-form').hidden).toBe(true);
  expect(byId('session-user').textContent).toBe(ADMIN_USER);
});

test('correction editor blocks an empty target before anything is uploaded', async () => {
  location.hash = '#train';
  app.route();
  await waitFor(() => document.getElementById('create-dataset') !== null, 15_000, 'editor render');
  const source = document.querySelector('.page-source') as HTMLTextAreaElement;
  setValue(source, 'page with no correction');
  const uploadsBefore = recorder.count('POST /api/datasets');
  byId<HTMLButtonElement>('create-dataset').click();
  await sleep(150);
  expect(flashText()).toContain('empty target');
  expect(recorder.count('POST /api/datasets')).toBe(uploadsBefore);
});

test('editing 10 pages creates a dataset with item_count 10', async () => {
  for (let i = 0; i < 9; i++) byId<HTMLButtonElement>('add-page').click();
  const rows = document.querySelectorAll('.page-row');
  expect(rows).toHaveLength(10);
  document.querySelectorAll('.page-row').forEach((row, i) => {
    setValue(row.querySelector('.page-source') as HTMLTextAreaElement, `wrd${i}`);
    setValue(row.querySelector('.page-target') as HTMLTextAreaElement, `word${i}`);
  });
  byId<HTMLButtonElement>('create-dataset').click();
  await waitFor(() => flashText().includes('created with 10 page(s)'), 15_000, 'dataset created');
  datasetId = flashText().match(/dataset (d_[0-9a-f]+)/)![1];
});

test('fine-tune wizard launches training and reports the child model ready', async () => {
  // the dataset option proves the post-upload re-render has landed
  await waitFor(
    () => [...document.querySelectorAll('#wizard-dataset option')].some((o) => (o as HTMLOptionElement).value === datasetId),
    15_000,
    'wizard to list the new dataset',
  );
  const modelSelect = byId<HTMLSelectElement>('wizard-model');
  modelSelect.value = BASE_TRANSLATE;
  const datasetSelect = byId<HTMLSelectElement>('wizard-dataset');
  datasetSelect.value = datasetId;
  byId<HTMLButtonElement>('launch-finetune').click();
  await waitFor(() => document.getElementById('training-status') !== null, 15_000, 'progress card');
  const codes = document.querySelectorAll('#training-status code');
  trainJobId = codes[0].textContent!;
  childModelId = codes[1].textContent!;
  expect(trainJobId).toMatch(/^j_/);
  expect(childModelId).toMatch(/^m_/);
  await waitFor(() => document.getElementById('training-done') !== null, 30_000, 'training ready');
  expect(byId('training-done').textContent).toContain(childModelId);
});

test('playground round-trips a prediction through the fine-tuned model', async () => {
  location.hash = '#playground';
  app.route();
  await waitFor(() => document.getElementById('playground-model') !== null, 15_000, 'playground render');
  const select = byId<HTMLSelectElement>('playground-model');
  expect([...select.options].map((o) => o.value)).toContain(childModelId);
  select.value = childModelId;
  select.dispatchEvent(new Event('change'));
  await waitFor(() => document.getElementById('playground-input') !== null, 5_000, 'input pane');
  setValue(byId<HTMLTextAreaElement>('playground-input'), 'wrd0 wrd3 mystery');
  byId<HTMLButtonElement>('playground-run').click();
  await waitFor(() => document.getElementById('playground-result') !== null, 20_000, 'prediction result');
  expect(byId('playground-result').textContent).toBe('word0 word3 mystery');
});

test('a failed prediction shows the failure reason and a restart button', async () => {
  const select = byId<HTMLSelectElement>('playground-model');
  select.value = 'm_base_diarize_diarize-windows';
  select.dispatchEvent(new Event('change'));
  await waitFor(() => document.getElementById('playground-input') !== null, 5_000, 'input pane');
  setValue(byId<HTMLTextAreaElement>('playground-input'), 'this is not windows json');
  byId<HTMLButtonElement>('playground-run').click();
  await waitFor(() => document.getElementById('playground-failure') !== null, 20_000, 'failure shown');
  expect(byId('playground-failure').textContent!.length).toBeGreaterThan(0);
  expect(document.getElementById('playground-restart')).not.toBeNull();
});

test('jobs dashboard tail byte-matches `client jobs-tail`', async () => {
  location.hash = `#jobs/${trainJobId}`;
  app.route();
  const opened = Date.now();
  await waitFor(() => app.jobs.tailText().length > 0, 15_000, 'first log chunk');
  // appended chunks must appear within 2 poll intervals (1 s each) + slack
  expect(Date.now() - opened).toBeLessThan(3_000);

  const cliBytes = server.cliJobsTail(trainJobId, app.api.token!);
  const cliText = cliBytes.toString('utf-8');
  const statusLine = `job ${trainJobId} succeeded\n`;
  expect(cliText.endsWith(statusLine)).toBe(true);
  const cliLog = cliText.slice(0, -statusLine.length);
  await waitFor(() => app.jobs.tailText() === cliLog, 10_000, 'tail to catch up');
  expect(Buffer.from(app.jobs.tailText(), 'utf-8').equals(Buffer.from(cliLog, 'utf-8'))).toBe(true);
});

test('cancel and restart are both disabled on a succeeded job', async () => {
  await waitFor(() => document.getElementById('job-cancel') !== null, 10_000, 'job actions');
  expect(byId<HTMLButtonElement>('job-cancel').disabled).toBe(true);
  expect(byId<HTMLButtonElement>('job-restart').disabled).toBe(true);
});

test('share toggle flips the visibility badge', async () => {
  location.hash = '#models';
  app.route();
  await waitFor(
    () => document.querySelector(`tr[data-model-id="${childModelId}"]`) !== null,
    15_000,
    'models table',
  );
  const row = document.querySelector(`tr[data-model-id="${childModelId}"]`)!;
  expect(row.querySelector('.badge')!.textContent).toBe('private');
  (row.querySelector('button[data-action="share"]') as HTMLButtonElement).click();
  await waitFor(() => {
    const fresh = document.querySelector(`tr[data-model-id="${childModelId}"]`);
    return fresh?.querySelector('.badge')?.textContent === 'public';
  }, 15_000, 'badge flip');
});

test('relaunching from the child model grows the lineage to 3 breadcrumb links', async () => {
  location.hash = '#train';
  app.route();
  // fresh render: the stale progress card is gone and the child is tunable
  await waitFor(
    () =>
      document.getElementById('training-status') === null &&
      [...document.querySelectorAll('#wizard-model option')].some((o) => (o as HTMLOptionElement).value === childModelId),
    15_000,
    'wizard re-render after navigation',
  );
  const modelSelect = byId<HTMLSelectElement>('wizard-model');
  modelSelect.value = childModelId;
  byId<HTMLSelectElement>('wizard-dataset').value = datasetId;
  byId<HTMLButtonElement>('launch-finetune').click();
  await waitFor(() => document.getElementById('training-done') !== null, 30_000, 'grandchild ready');
  grandchildModelId = document.querySelectorAll('#training-status code')[1].textContent!;
  expect(grandchildModelId).not.toBe(childModelId);

  location.hash = '#models';
  app.route();
  await waitFor(
    () => document.querySelector(`tr[data-model-id="${grandchildModelId}"]`) !== null,
    15_000,
    'grandchild row',
  );
  const crumbs = document
    .querySelector(`tr[data-model-id="${grandchildModelId}"]`)!
    .querySelectorAll('.crumb');
  expect(crumbs).toHaveLength(3);
});

test('declining the delete confirm leaves the model in place', async () => {
  confirmAnswer = false;
  const row = document.querySelector(`tr[data-model-id="${grandchildModelId}"]`)!;
  (row.querySelector('button[data-action="delete"]') as HTMLButtonElement).click();
  await sleep(150);
  expect(lastConfirmMessage).toContain(grandchildModelId);
  expect(lastConfirmMessage).toMatch(/training jobs/);
  expect(document.querySelector(`tr[data-model-id="${grandchildModelId}"]`)).not.toBeNull();
});

test('confirmed delete removes the model and its job views show not-found', async () => {
  confirmAnswer = true;
  const jobs = (await app.api.listJobs()).jobs;
  const grandTrain = jobs.find((j) => j.kind === 'train' && j.model_id === grandchildModelId)!;
  const row = document.querySelector(`tr[data-model-id="${grandchildModelId}"]`)!;
  (row.querySelector('button[data-action="delete"]') as HTMLButtonElement).click();
  await waitFor(
    () => document.querySelector(`tr[data-model-id="${grandchildModelId}"]`) === null,
    15_000,
    'model row to disappear',
  );
  location.hash = `#jobs/${grandTrain.job_id}`;
  app.route();
  await waitFor(() => document.getElementById('job-not-found') !== null, 10_000, 'not-found notice');
  app.jobs.stop();
});

test('live queued job: cancel enabled, then cancelled, then restartable', async () => {
  // fresh app against the workerless server so the job stays queued
  app.destroy();
  mountShell();
  const app2 = new App({ apiBase: idle.url, confirmDialog: () => true });
  setValue(byId<HTMLInputElement>('login-username'), ADMIN_USER);
  setValue(byId<HTMLInputElement>('login-password'), ADMIN_PASS);
  await app2.login();

  const pairs = '{"source": "a", "target": "b"}';
  const dataset = await app2.api.uploadDataset('text_pairs_jsonl', 'train', pairs);
  const launched = await app2.api.finetune(BASE_TRANSLATE, dataset.dataset_id);

  // the child model is visibly training while the job sits queued
  location.hash = '#models';
  app2.route();
  await waitFor(
    () =>
      document
        .querySelector(`tr[data-model-id="${launched.new_model_id}"]`)
        ?.querySelector('.chip')?.textContent === 'training',
    15_000,
    'training chip',
  );

  location.hash = `#jobs/${launched.job_id}`;
  app2.route();
  await waitFor(() => document.getElementById('job-cancel') !== null, 15_000, 'job actions');
  await waitFor(
    () => !byId<HTMLButtonElement>('job-cancel').disabled,
    10_000,
    'cancel enabled on queued job',
  );
  expect(byId<HTMLButtonElement>('job-restart').disabled).toBe(true);

  byId<HTMLButtonElement>('job-cancel').click();
  await waitFor(
    () => byId<HTMLButtonElement>('job-restart').disabled === false,
    15_000,
    'restart enabled after cancel',
  );
  expect(byId<HTMLButtonElement>('job-cancel').disabled).toBe(true);
  expect((await app2.api.getJob(launched.job_id)).status).toBe('cancelled');

  byId<HTMLButtonElement>('job-restart').click();
  await waitFor(
    () => !byId<HTMLButtonElement>('job-cancel').disabled,
    15_000,
    'cancel enabled again after restart',
  );
  expect((await app2.api.getJob(launched.job_id)).status).toBe('queued');
  app2.destroy();
});

test('the UI only ever called documented REST routes', () => {
  expect(recorder.seen.length).toBeGreaterThan(0);
  expect(recorder.undocumented).toEqual([]);
});
