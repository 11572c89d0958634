/**
 * App shell: session handling, hash routing between the four views, and
 * wiring them to one Api instance. The api base is same-origin ('') when
 * served by the backend; tests inject an absolute base.
 */

import { Api } from './api.js';
import { el, flash } from './dom.js';
import { EditorView } from './editor.js';
import { JobsView } from './jobs.js';
import { ModelsView } from './models.js';
import { PlaygroundView } from './playground.js';

export interface AppOptions {
  apiBase?: string;
  pollIntervalMs?: number;
  confirmDialog?: (message: string) => boolean;
}

export class App {
  api: Api;
  models: ModelsView;
  playground: PlaygroundView;
  editor: EditorView;
  jobs: JobsView;
  private currentUserId: string | null = null;
  private lastDispatchedHash: string | null = null;
  // Skip the event when route() already dispatched this exact hash (a direct
  // route() call is always followed by the browser's async hashchange).
  private readonly onHashChange = () => {
    if (location.hash === this.lastDispatchedHash) return;
    this.route();
  };

  constructor(opts: AppOptions = {}) {
    this.api = new Api(opts.apiBase ?? '', localStorage.getItem('annolab_token'));
    this.currentUserId = localStorage.getItem('annolab_user_id');
    this.models = new ModelsView(section('view-models'), {
      api: this.api,
      userId: () => this.currentUserId,
      confirmDialog: opts.confirmDialog,
      onOpenPlayground: (model) => {
        location.hash = '#playground';
        void this.playground.refresh(model);
      },
    });
    this.playground = new PlaygroundView(section('view-playground'), this.api);
    this.editor = new EditorView(section('view-train'), this.api);
    this.jobs = new JobsView(section('view-jobs'), this.api, opts.pollIntervalMs ?? 1000);

    this.bindSession();
    window.addEventListener('hashchange', this.onHashChange);
    this.updateSessionBar();
    this.route();
  }

  /** Detach from the page: stop every poll and stop responding to navigation. */
  destroy(): void {
    window.removeEventListener('hashchange', this.onHashChange);
    this.jobs.stop();
    this.playground.stop();
    this.editor.stop();
  }

  get loggedIn(): boolean {
    return this.api.token !== null;
  }

  private bindSession(): void {
    const form = document.getElementById('login-form') as HTMLFormElement | null;
    form?.addEventListener('submit', (event) => {
      event.preventDefault();
      void this.login();
    });
    document.getElementById('logout-button')?.addEventListener('click', () => {
      this.api.token = null;
      this.currentUserId = null;
      localStorage.removeItem('annolab_token');
      localStorage.removeItem('annolab_user_id');
      this.updateSessionBar();
      this.route();
    });
  }

  async login(): Promise<void> {
    const username = (document.getElementById('login-username') as HTMLInputElement).value;
    const password = (document.getElementById('login-password') as HTMLInputElement).value;
    try {
      const res = await this.api.login(username, password);
      this.api.token = res.token;
      this.currentUserId = res.user_id;
      localStorage.setItem('annolab_token', res.token);
      localStorage.setItem('annolab_user_id', res.user_id);
      localStorage.setItem('annolab_username', username);
      flash('');
      this.updateSessionBar(username);
      this.route();
    } catch (err: any) {
      flash(`login failed: ${err.message}`, 'error');
    }
  }

  private updateSessionBar(username?: string): void {
    const form = document.getElementById('login-form');
    const who = document.getElementById('session-user');
    const logout = document.getElementById('logout-button');
    if (!form || !who || !logout) return;
    if (this.loggedIn) {
      form.hidden = true;
      who.hidden = false;
      who.textContent = username ?? localStorage.getItem('annolab_username') ?? 'signed in';
      logout.hidden = false;
    } else {
      form.hidden = false;
      who.hidden = true;
      logout.hidden = true;
    }
  }

  route(): void {
    this.lastDispatchedHash = location.hash;
    const hash = location.hash || '#models';
    const [tab, arg] = hash.slice(1).split('/');
    for (const name of ['models', 'playground', 'train', 'jobs']) {
      const sectionEl = document.getElementById(`view-${name}`);
      if (sectionEl) sectionEl.hidden = name !== tab;
      document.querySelector(`nav a[data-tab="${name}"]`)?.classList.toggle('active', name === tab);
    }
    this.jobs.stop();
    if (!this.loggedIn) {
      flash('log in to use annolab');
      return;
    }
    flash('');
    switch (tab) {
      case 'playground':
        void this.playground.refresh();
        break;
      case 'train':
        void this.editor.refresh();
        break;
      case 'jobs':
        this.jobs.start(arg);
        break;
      case 'models':
      default:
        void this.models.refresh();
        break;
    }
  }
}

function section(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (node) return node;
  const fresh = el('section', { id });
  document.body.append(fresh);
  return fresh;
}

/** Browser entry point; tests construct App themselves. */
export function start(): App {
  return new App({});
}

if (typeof document !== 'undefined' && document.getElementById('annolab-app')) {
  start();
}
