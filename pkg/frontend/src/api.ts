/**
 * Typed client for the annolab REST API.
 *
 * Every request goes through Api.request, which only ever targets the
 * documented routes below. Errors use the server's uniform envelope
 * {"error": {"code", "message"}} and surface as ApiError.
 */

export interface ModelDoc {
  model_id: string;
  owner: string;
  plugin_id: string;
  task_name: string;
  parent_model_id: string | null;
  dataset_ids: string[];
  visibility: 'private' | 'public';
  status: 'training' | 'ready' | 'failed';
  artifact: string | null;
  failure_reason: string | null;
  created_at: number;
  /** Ancestry chain, self first, root last. */
  lineage: string[];
}

export interface DatasetDoc {
  dataset_id: string;
  owner: string;
  task_name: string;
  format: string;
  item_count: number;
  blob: string;
  created_at: number;
}

export type JobStatus = 'queued' | 'running' | 'succeeded' | 'failed' | 'cancelled';

export interface JobDoc {
  job_id: string;
  owner: string;
  kind: 'predict' | 'train';
  plugin_id: string;
  task_name: string;
  model_id: string | null;
  dataset_id: string | null;
  queue_class: string;
  status: JobStatus;
  attempt: number;
  max_attempts: number;
  cancel_requested: boolean;
  submitted_at: number;
  queued_at: number;
  result: string | null;
  failure_reason: string | null;
  input_ref: string | null;
  params: Record<string, unknown>;
}

export interface TaskDoc {
  task_name: string;
  kind: 'predict' | 'train';
  input_kind: string;
  output_kind: string;
  queue_class: string;
  supports_finetune: boolean;
  languages: string[];
}

export interface PluginDoc {
  plugin_id: string;
  version: string;
  execution: string;
  tasks: TaskDoc[];
}

export interface LogChunk {
  payload_b64: string;
  next_offset: number;
  finished: boolean;
}

export interface MetaDoc {
  version: string;
  routes: { method: string; path: string; auth: string; description: string }[];
}

export interface UserDoc {
  user_id: string;
  username: string;
  display_name: string;
  role: string;
  created_at: number;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
    this.name = 'ApiError';
  }
}

interface RequestOptions {
  query?: Record<string, string>;
  json?: unknown;
  body?: BodyInit;
  raw?: boolean; // return the Response instead of parsed JSON
}

export class Api {
  constructor(
    public base: string,
    public token: string | null = null,
  ) {}

  async request(method: string, path: string, opts: RequestOptions = {}): Promise<any> {
    let url = this.base + path;
    if (opts.query) url += '?' + new URLSearchParams(opts.query).toString();
    const headers: Record<string, string> = {};
    if (this.token) headers['authorization'] = `Bearer ${this.token}`;
    let body: BodyInit | undefined = opts.body;
    if (opts.json !== undefined) {
      headers['content-type'] = 'application/json';
      body = JSON.stringify(opts.json);
    }
    let resp: Response;
    try {
      resp = await fetch(url, { method, headers, body });
    } catch (err) {
      throw new ApiError(0, 'unreachable', `cannot reach ${this.base || 'server'}: ${err}`);
    }
    if (!resp.ok) {
      let code = 'error';
      let message = `${resp.status} ${resp.statusText}`;
      try {
        const doc = await resp.json();
        if (doc?.error) {
          code = doc.error.code ?? code;
          message = doc.error.message ?? message;
        }
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(resp.status, code, message);
    }
    return opts.raw ? resp : resp.json();
  }

  // ----- auth / users

  login(username: string, password: string): Promise<{ token: string; user_id: string }> {
    return this.request('POST', '/api/auth/token', { json: { username, password } });
  }

  createUser(body: { username: string; password: string; role?: string }): Promise<UserDoc> {
    return this.request('POST', '/api/users', { json: body });
  }

  // ----- models

  listModels(): Promise<{ models: ModelDoc[] }> {
    return this.request('GET', '/api/models');
  }

  getModel(modelId: string): Promise<ModelDoc> {
    return this.request('GET', `/api/models/${modelId}`);
  }

  setVisibility(modelId: string, visibility: 'private' | 'public'): Promise<ModelDoc> {
    return this.request('PATCH', `/api/models/${modelId}`, { json: { visibility } });
  }

  deleteModel(modelId: string): Promise<{ deleted: string[] }> {
    return this.request('DELETE', `/api/models/${modelId}`);
  }

  predict(
    modelId: string,
    input: { inline_input?: string; inline_input_b64?: string; input_ref?: string },
    params?: Record<string, unknown>,
  ): Promise<{ job_id: string }> {
    return this.request('POST', `/api/models/${modelId}/predict`, {
      json: params ? { ...input, params } : input,
    });
  }

  finetune(
    modelId: string,
    datasetId: string,
    params?: Record<string, unknown>,
  ): Promise<{ job_id: string; new_model_id: string }> {
    return this.request('POST', `/api/models/${modelId}/finetune`, {
      json: { dataset_id: datasetId, params: params ?? {} },
    });
  }

  // ----- datasets

  uploadDataset(format: string, taskName: string, data: string | Uint8Array): Promise<DatasetDoc> {
    return this.request('POST', '/api/datasets', {
      query: { format, task_name: taskName },
      body: data as BodyInit,
    });
  }

  listDatasets(): Promise<{ datasets: DatasetDoc[] }> {
    return this.request('GET', '/api/datasets');
  }

  deleteDataset(datasetId: string): Promise<{ deleted: boolean }> {
    return this.request('DELETE', `/api/datasets/${datasetId}`);
  }

  // ----- jobs

  listJobs(): Promise<{ jobs: JobDoc[] }> {
    return this.request('GET', '/api/jobs');
  }

  getJob(jobId: string): Promise<JobDoc> {
    return this.request('GET', `/api/jobs/${jobId}`);
  }

  jobLogs(jobId: string, offset: number): Promise<LogChunk> {
    return this.request('GET', `/api/jobs/${jobId}/logs`, {
      query: { offset: String(offset) },
    });
  }

  async jobResult(jobId: string): Promise<Uint8Array> {
    const resp: Response = await this.request('GET', `/api/jobs/${jobId}/result`, { raw: true });
    return new Uint8Array(await resp.arrayBuffer());
  }

  cancelJob(jobId: string): Promise<JobDoc> {
    return this.request('POST', `/api/jobs/${jobId}/cancel`);
  }

  restartJob(jobId: string): Promise<JobDoc> {
    return this.request('POST', `/api/jobs/${jobId}/restart`);
  }

  // ----- introspection

  meta(): Promise<MetaDoc> {
    return this.request('GET', '/api/meta');
  }

  listPlugins(): Promise<{ plugins: PluginDoc[] }> {
    return this.request('GET', '/api/plugins');
  }

  queueStats(): Promise<Record<string, unknown>> {
    return this.request('GET', '/api/queue/stats');
  }
}

/** Decode a base64 payload to bytes (browser atob; no Node Buffer). */
export function b64decode(b64: string): Uint8Array {
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}

/** Encode bytes to base64 in chunks (avoids call-stack limits on large files). */
export function b64encode(bytes: Uint8Array): string {
  let bin = '';
  const step = 0x8000;
  for (let i = 0; i < bytes.length; i += step) {
    bin += String.fromCharCode(...bytes.subarray(i, i + step));
  }
  return btoa(bin);
}
