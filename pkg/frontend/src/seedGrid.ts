/**
 * Seed-grid assembly for best-of-k review: one thumbnail per generated run,
 * ordered by seed. Selection stays with the human; this module only lays
 * the grid out.
 */

import type { RunManifest } from "./schemas.js";

export interface SeedThumbnail {
  seed: number;
  runId: string;
  imageUrl: string;
}

/**
 * Build the thumbnail list for an SS@k job from its run manifests.
 * Output length equals the number of runs and is sorted by seed ascending,
 * preserving the consecutive-seed protocol regardless of fetch order.
 */
export function buildSeedGrid(
  manifests: RunManifest[],
  baseUrl = "",
): SeedThumbnail[] {
  return manifests
    .map((m) => ({
      seed: m.config.seed,
      runId: m.run_id,
      imageUrl: `${baseUrl}/runs/${m.run_id}/image`,
    }))
    .sort((a, b) => a.seed - b.seed);
}
