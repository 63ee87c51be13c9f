/**
 * Zod schemas mirroring the generation service's JSON contracts: every
 * payload the UI emits is validated against these before it leaves the
 * browser, and every response is parsed through them on the way in.
 */

import { z } from "zod";

const fraction = z.number().min(0).max(1);

export const BoxSchema = z
  .object({
    left: fraction,
    right: fraction,
    top: fraction,
    bottom: fraction,
  })
  .refine((b) => b.left < b.right, { message: "left must be less than right" })
  .refine((b) => b.top < b.bottom, { message: "top must be less than bottom" });

export const DirectiveSchema = z.object({
  box: BoxSchema,
  token_indices: z.array(z.number().int().min(1)).nonempty(),
  label: z.string().default(""),
});

const sampling = {
  total_steps: z.number().int().min(1).default(50),
  edit_steps: z.number().int().min(0).default(10),
  guidance_scale: z.number().default(7.5),
  seed: z.number().int().default(0),
  opt_iterations: z.number().int().min(1).default(5),
};

export const GeneratePayloadSchema = z.object({
  prompt: z.string().min(1),
  directives: z.array(DirectiveSchema).nonempty(),
  ...sampling,
});

export const SskPayloadSchema = z.object({
  prompt: z.string().min(1),
  directives: z.array(DirectiveSchema).nonempty(),
  k: z.number().int().min(1).default(12),
  seed0: z.number().int().default(0),
  ...sampling,
});

export const ComposePayloadSchema = z.object({
  full_prompt: z.string().min(1),
  sources: z
    .array(z.object({ run_id: z.string().min(1), weight: fraction }))
    .nonempty(),
  ...sampling,
});

export const PfPayloadSchema = z.object({
  run_id: z.string().min(1),
  directive: DirectiveSchema,
  dx: z.number().int(),
  dy: z.number().int(),
  edit_steps: z.number().int().min(0).default(10),
  threshold_fraction: z.number().gt(0).max(1).default(0.5),
});

export const SubmitResponseSchema = z.object({
  job_id: z.string(),
  queue_position: z.number().int(),
});

export const JobStatusSchema = z.object({
  job_id: z.string(),
  kind: z.enum(["generate", "ssk", "compose", "pf", "ablate"]),
  status: z.enum(["queued", "running", "done", "failed"]),
  queue_position: z.number().int(),
  run_ids: z.array(z.string()),
  error: z.string().nullable(),
});

export const RunManifestSchema = z.object({
  run_id: z.string(),
  kind: z.string(),
  prompt: z.string(),
  config: z.object({
    total_steps: z.number().int(),
    edit_steps: z.number().int(),
    guidance_scale: z.number(),
    seed: z.number().int(),
  }).passthrough(),
  directives: z.array(DirectiveSchema),
  sources: z.array(z.string()),
  error: z.string().nullable(),
});

export const ValidationErrorSchema = z.object({
  detail: z.array(z.object({ field: z.string(), message: z.string() })),
});

export const TokensResponseSchema = z.object({
  prompt: z.string(),
  tokens: z.array(z.string()),
});

export type GeneratePayload = z.infer<typeof GeneratePayloadSchema>;
export type SskPayload = z.infer<typeof SskPayloadSchema>;
export type PfPayload = z.infer<typeof PfPayloadSchema>;
export type JobStatus = z.infer<typeof JobStatusSchema>;
export type RunManifest = z.infer<typeof RunManifestSchema>;
