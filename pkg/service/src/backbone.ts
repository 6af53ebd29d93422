/**
 * Score backbones: given a noisy latent z_t, a timestep, and a prompt,
 * predict the noise. The service wraps whichever backbone is configured
 * behind the SDS gradient computation.
 *
 * Built-ins:
 *  - "mock": short-circuits the whole pipeline to zero gradients.
 *  - "gaussian": analytic Gaussian-prior score. The prompt hashes to a smooth
 *    mean image in latent space; the exact posterior noise prediction for
 *    z0 ~ N(mu, s^2 I) is used, so descent on the residual provably pulls
 *    images toward the prompt's mean. Deterministic and weight-free: the
 *    stand-in that lets conformance and sanity tests run without a model.
 *  - "sd:<path>": placeholder adapter for a real latent-diffusion model;
 *    loading fails with a startup error unless weights exist at the path.
 */

import { existsSync } from 'node:fs';
import { Rng } from './rng.js';

export interface Latent {
  data: Float64Array; // [h, w, 3] row-major
  h: number;
  w: number;
}

export interface ScoreBackbone {
  name: string;
  /** Predict the noise in z_t at timestep t conditioned on the prompt. */
  predictNoise(zt: Latent, alphaBar: number, prompt: string): Float64Array;
}

export class StartupError extends Error {}

const PRIOR_STD = 0.5;

function fnv1a(text: string): bigint {
  let h = 0xcbf29ce484222325n;
  const bytes = Buffer.from(text, 'utf8');
  for (const b of bytes) {
    h ^= BigInt(b);
    h = BigInt.asUintN(64, h * 0x100000001b3n);
  }
  return h;
}

/** Smooth low-frequency mean image derived from the prompt (zeros if empty). */
export function promptMean(prompt: string, h: number, w: number): Float64Array {
  const out = new Float64Array(h * w * 3);
  if (prompt.length === 0) return out;
  const rng = new Rng(fnv1a(prompt));
  const nWaves = 3;
  const waves: Array<{ fx: number; fy: number; phase: number; amp: number[] }> = [];
  for (let k = 0; k < nWaves; k++) {
    waves.push({
      fx: 0.5 + 1.5 * rng.uniform(),
      fy: 0.5 + 1.5 * rng.uniform(),
      phase: 2 * Math.PI * rng.uniform(),
      amp: [rng.gaussian(), rng.gaussian(), rng.gaussian()].map((a) => 0.15 * a),
    });
  }
  for (let i = 0; i < h; i++) {
    for (let j = 0; j < w; j++) {
      const y = h > 1 ? i / (h - 1) : 0;
      const x = w > 1 ? j / (w - 1) : 0;
      for (const wv of waves) {
        const v = Math.sin(2 * Math.PI * (wv.fx * x + wv.fy * y) + wv.phase);
        for (let c = 0; c < 3; c++) out[(i * w + j) * 3 + c] += wv.amp[c] * v;
      }
    }
  }
  return out;
}

export class GaussianPriorBackbone implements ScoreBackbone {
  name = 'gaussian';

  predictNoise(zt: Latent, alphaBar: number, prompt: string): Float64Array {
    const alpha = Math.sqrt(alphaBar);
    const sigma = Math.sqrt(1 - alphaBar);
    const mu = promptMean(prompt, zt.h, zt.w);
    const s2 = PRIOR_STD * PRIOR_STD;
    // E[z0 | zt] = mu + (alpha s^2 / (alpha^2 s^2 + sigma^2)) (zt - alpha mu)
    const k = (alpha * s2) / (alpha * alpha * s2 + sigma * sigma);
    const out = new Float64Array(zt.data.length);
    for (let i = 0; i < zt.data.length; i++) {
      const z0hat = mu[i] + k * (zt.data[i] - alpha * mu[i]);
      out[i] = (zt.data[i] - alpha * z0hat) / sigma;
    }
    return out;
  }
}

export class MockBackbone implements ScoreBackbone {
  name = 'mock';

  predictNoise(zt: Latent): Float64Array {
    return new Float64Array(zt.data.length); // unused: mock short-circuits
  }
}

export function loadBackbone(id: string): ScoreBackbone {
  if (id === 'mock') return new MockBackbone();
  if (id === 'gaussian') return new GaussianPriorBackbone();
  if (id.startsWith('sd:')) {
    const path = id.slice(3);
    if (!existsSync(path)) {
      throw new StartupError(
        `cannot load diffusion weights from ${path}: file does not exist`);
    }
    throw new StartupError(
      'the latent-diffusion adapter requires an inference runtime that is not bundled; ' +
      'use the gaussian or mock backbone, or plug a runtime into loadBackbone');
  }
  throw new StartupError(`unknown backbone ${JSON.stringify(id)}`);
}
