/**
 * Deterministic PRNG: splitmix64 seeding + xoshiro256** core, plus a
 * Box-Muller gaussian. Every request's (t, noise) draws come from one of
 * these seeded from the request seed, so repeated requests are bit-identical.
 */

export class Rng {
  private s: BigUint64Array;
  private spare: number | null = null;

  constructor(seed: bigint) {
    this.s = new BigUint64Array(4);
    let x = BigInt.asUintN(64, seed);
    for (let i = 0; i < 4; i++) {
      // splitmix64
      x = BigInt.asUintN(64, x + 0x9e3779b97f4a7c15n);
      let z = x;
      z = BigInt.asUintN(64, (z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n);
      z = BigInt.asUintN(64, (z ^ (z >> 27n)) * 0x94d049bb133111ebn);
      this.s[i] = BigInt.asUintN(64, z ^ (z >> 31n));
    }
  }

  nextU64(): bigint {
    const s = this.s;
    const rotl = (v: bigint, k: bigint) =>
      BigInt.asUintN(64, (v << k) | (v >> (64n - k)));
    const result = BigInt.asUintN(64, rotl(BigInt.asUintN(64, s[1] * 5n), 7n) * 9n);
    const t = BigInt.asUintN(64, s[1] << 17n);
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45n);
    return result;
  }

  /** uniform in [0, 1) with 53-bit resolution */
  uniform(): number {
    return Number(this.nextU64() >> 11n) / 9007199254740992;
  }

  /** uniform integer in [lo, hi] inclusive */
  int(lo: number, hi: number): number {
    const span = hi - lo + 1;
    return lo + Math.floor(this.uniform() * span) % span;
  }

  gaussian(): number {
    if (this.spare !== null) {
      const v = this.spare;
      this.spare = null;
      return v;
    }
    let u = this.uniform();
    if (u <= 0) u = 2 ** -53;
    const v = this.uniform();
    const r = Math.sqrt(-2 * Math.log(u));
    this.spare = r * Math.sin(2 * Math.PI * v);
    return r * Math.cos(2 * Math.PI * v);
  }
}
