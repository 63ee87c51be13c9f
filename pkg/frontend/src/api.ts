/**
 * Minimal fetch client for the generation service. Every outgoing payload
 * is validated against the shared schemas before it is sent; every response
 * body is parsed through them on receipt, so type errors surface at the
 * boundary rather than deep in the UI.
 */

import {
  GeneratePayloadSchema,
  SskPayloadSchema,
  ComposePayloadSchema,
  PfPayloadSchema,
  SubmitResponseSchema,
  JobStatusSchema,
  RunManifestSchema,
  TokensResponseSchema,
  ValidationErrorSchema,
} from "./schemas.js";
import type { JobStatus, RunManifest } from "./schemas.js";
import { z } from "zod";

export type JobKind = "generate" | "ssk" | "compose" | "pf";

const PAYLOAD_SCHEMAS: Record<JobKind, z.ZodTypeAny> = {
  generate: GeneratePayloadSchema,
  ssk: SskPayloadSchema,
  compose: ComposePayloadSchema,
  pf: PfPayloadSchema,
};

/** Raised when the service rejects a payload with field-level details. */
export class ServiceValidationError extends Error {
  constructor(
    public readonly fields: { field: string; message: string }[],
  ) {
    super(fields.map((f) => `${f.field}: ${f.message}`).join("; "));
    this.name = "ServiceValidationError";
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  /** Validate locally, POST the job, and return its id and queue position. */
  async submitJob(kind: JobKind, payload: unknown) {
    const body = PAYLOAD_SCHEMAS[kind].parse(payload);
    const res = await this.fetchFn(`${this.baseUrl}/jobs/${kind}`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (res.status === 422) {
      const err = ValidationErrorSchema.parse(await res.json());
      throw new ServiceValidationError(err.detail);
    }
    if (!res.ok) {
      throw new Error(`job submission failed: HTTP ${res.status}`);
    }
    return SubmitResponseSchema.parse(await res.json());
  }

  /** Long-poll the job status endpoint; the service holds the request
   * open up to `timeoutSeconds` before answering with the current state. */
  async getJob(jobId: string, timeoutSeconds = 0): Promise<JobStatus> {
    const suffix = timeoutSeconds > 0 ? `?timeout=${timeoutSeconds}` : "";
    const res = await this.fetchFn(`${this.baseUrl}/jobs/${jobId}${suffix}`);
    if (!res.ok) {
      throw new Error(`job lookup failed: HTTP ${res.status}`);
    }
    return JobStatusSchema.parse(await res.json());
  }

  /** Poll until the job leaves the queue, then return its terminal state. */
  async waitForJob(jobId: string, pollSeconds = 10): Promise<JobStatus> {
    for (;;) {
      const status = await this.getJob(jobId, pollSeconds);
      if (status.status === "done" || status.status === "failed") {
        return status;
      }
    }
  }

  async getRun(runId: string): Promise<RunManifest> {
    const res = await this.fetchFn(`${this.baseUrl}/runs/${runId}`);
    if (!res.ok) {
      throw new Error(`run lookup failed: HTTP ${res.status}`);
    }
    return RunManifestSchema.parse(await res.json());
  }

  async getTokens(prompt: string) {
    const res = await this.fetchFn(
      `${this.baseUrl}/tokens?prompt=${encodeURIComponent(prompt)}`,
    );
    if (!res.ok) {
      throw new Error(`tokenization failed: HTTP ${res.status}`);
    }
    return TokensResponseSchema.parse(await res.json());
  }

  imageUrl(runId: string): string {
    return `${this.baseUrl}/runs/${runId}/image`;
  }

  attentionUrl(runId: string, tokenIndex: number): string {
    return `${this.baseUrl}/runs/${runId}/attention/${tokenIndex}`;
  }
}
