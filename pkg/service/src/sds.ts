/**
 * Image-space guidance gradient computation.
 *
 * Per image: encode to a latent (average pooling), draw a timestep and noise
 * from the request seed, noise the latent, predict the noise with
 * classifier-free guidance at the request scale, form the weighted residual
 * w(t) (eps_hat - eps), and pull it back through the encoder to image space.
 */

import { GuidanceRequest } from './protocol.js';
import { Rng } from './rng.js';
import { Latent, MockBackbone, ScoreBackbone } from './backbone.js';

export const SCHEDULE_STEPS = 1000;
const BETA_START = 0.00085;
const BETA_END = 0.012;

export type WeightMode = 'sigma2' | 'uniform';

/** DDPM linear-beta schedule; alphaBar[t] for t in [1, SCHEDULE_STEPS]. */
export function alphaBar(t: number): number {
  let prod = 1.0;
  for (let i = 0; i < t; i++) {
    const beta = BETA_START + ((BETA_END - BETA_START) * i) / (SCHEDULE_STEPS - 1);
    prod *= 1 - beta;
  }
  return prod;
}

const alphaBarTable: number[] = (() => {
  const table = new Array(SCHEDULE_STEPS + 1).fill(1.0);
  let prod = 1.0;
  for (let i = 1; i <= SCHEDULE_STEPS; i++) {
    const beta = BETA_START + ((BETA_END - BETA_START) * (i - 1)) / (SCHEDULE_STEPS - 1);
    prod *= 1 - beta;
    table[i] = prod;
  }
  return table;
})();

function poolFactor(h: number, w: number): number {
  return h % 8 === 0 && w % 8 === 0 ? 8 : 1;
}

function encode(image: Float64Array, h: number, w: number, f: number): Latent {
  const lh = h / f;
  const lw = w / f;
  const data = new Float64Array(lh * lw * 3);
  for (let i = 0; i < h; i++) {
    for (let j = 0; j < w; j++) {
      const li = Math.floor(i / f);
      const lj = Math.floor(j / f);
      for (let c = 0; c < 3; c++) {
        data[(li * lw + lj) * 3 + c] += image[(i * w + j) * 3 + c];
      }
    }
  }
  const inv = 1 / (f * f);
  for (let i = 0; i < data.length; i++) data[i] *= inv;
  return { data, h: lh, w: lw };
}

function pullback(residual: Latent, h: number, w: number, f: number): Float32Array {
  const out = new Float32Array(h * w * 3);
  const inv = 1 / (f * f);
  for (let i = 0; i < h; i++) {
    for (let j = 0; j < w; j++) {
      const li = Math.floor(i / f);
      const lj = Math.floor(j / f);
      for (let c = 0; c < 3; c++) {
        out[(i * w + j) * 3 + c] = residual.data[(li * residual.w + lj) * 3 + c] * inv;
      }
    }
  }
  return out;
}

export interface SdsOptions {
  deterministic: boolean;
  weightMode: WeightMode;
  nonce?: bigint;
}

export function sdsGradient(req: GuidanceRequest, backbone: ScoreBackbone,
                            opts: SdsOptions): Float32Array {
  const { b, h, w } = req;
  if (backbone instanceof MockBackbone) {
    return new Float32Array(b * h * w * 3); // zero gradients, no model math
  }
  const out = new Float32Array(b * h * w * 3);
  const f = poolFactor(h, w);
  const tMax = Math.min(req.tMax, SCHEDULE_STEPS);
  const tMin = Math.max(1, Math.min(req.tMin, tMax));
  const baseSeed = opts.deterministic ? req.seed : req.seed ^ (opts.nonce ?? 0n);
  for (let img = 0; img < b; img++) {
    const rng = new Rng(baseSeed + BigInt(img) * 0x9e3779b9n);
    const image = new Float64Array(h * w * 3);
    const offset = img * h * w * 3;
    for (let i = 0; i < image.length; i++) image[i] = req.images[offset + i];

    const z = encode(image, h, w, f);
    const t = rng.int(tMin, tMax);
    const ab = alphaBarTable[t];
    const alpha = Math.sqrt(ab);
    const sigma = Math.sqrt(1 - ab);
    const eps = new Float64Array(z.data.length);
    for (let i = 0; i < eps.length; i++) eps[i] = rng.gaussian();
    const zt: Latent = { data: new Float64Array(z.data.length), h: z.h, w: z.w };
    for (let i = 0; i < z.data.length; i++) zt.data[i] = alpha * z.data[i] + sigma * eps[i];

    const condHat = backbone.predictNoise(zt, ab, req.prompt);
    const uncondHat = backbone.predictNoise(zt, ab, '');
    const scale = req.guidanceScale;
    const weight = opts.weightMode === 'uniform' ? 1.0 : 1 - ab;
    const residual: Latent = { data: new Float64Array(z.data.length), h: z.h, w: z.w };
    for (let i = 0; i < z.data.length; i++) {
      const guided = uncondHat[i] + scale * (condHat[i] - uncondHat[i]);
      residual.data[i] = weight * (guided - eps[i]);
    }
    const grad = pullback(residual, h, w, f);
    out.set(grad, offset);
  }
  for (const v of out) {
    if (!Number.isFinite(v)) throw new Error('non-finite gradient');
  }
  return out;
}
