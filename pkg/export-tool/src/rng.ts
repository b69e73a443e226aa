/**
 * Deterministic seeded RNG (mulberry32-based) with 53-bit uniform doubles
 * and Box-Muller gaussians. Fixture exports must be byte-reproducible, so
 * everything downstream draws from this and nothing else.
 */

export class Rng {
  private state: number;

  constructor(seed: number) {
    this.state = seed >>> 0;
    // avoid the all-zero fixed point
    if (this.state === 0) this.state = 0x9e3779b9;
  }

  private next32(): number {
    let t = (this.state += 0x6d2b79f5) >>> 0;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return (t ^ (t >>> 14)) >>> 0;
  }

  /** Uniform double in [0, 1) with full 53-bit mantissa. */
  uniform(): number {
    const hi = this.next32() >>> 5; // 27 bits
    const lo = this.next32() >>> 6; // 26 bits
    return (hi * 67108864 + lo) / 9007199254740992;
  }

  /** Standard normal via Box-Muller (uses two uniforms per draw). */
  gaussian(): number {
    const u1 = 1.0 - this.uniform(); // (0, 1]
    const u2 = this.uniform();
    return Math.sqrt(-2.0 * Math.log(u1)) * Math.cos(2.0 * Math.PI * u2);
  }

  int(maxExclusive: number): number {
    return Math.floor(this.uniform() * maxExclusive);
  }
}
