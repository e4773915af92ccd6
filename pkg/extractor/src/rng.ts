/** Deterministic PRNG (mulberry32) with a Box-Muller gaussian, so the frozen
 * backbone initialization is reproducible across platforms. All arithmetic
 * stays in exact 32-bit integer / 53-bit float territory. */

export class Rng {
  private state: number

  constructor(seed: number) {
    this.state = (Math.floor(seed) + 0x6d2b79f5) >>> 0
  }

  /** uniform in [0, 1) */
  next(): number {
    this.state = (this.state + 0x6d2b79f5) >>> 0
    let t = this.state
    t = Math.imul(t ^ (t >>> 15), t | 1)
    t = (t + Math.imul(t ^ (t >>> 7), t | 61)) ^ t
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }

  gaussian(): number {
    let u = 0
    while (u === 0) u = this.next()
    const v = this.next()
    return Math.sqrt(-2.0 * Math.log(u)) * Math.cos(2.0 * Math.PI * v)
  }

  fillGaussian(out: Float32Array, std: number): void {
    for (let i = 0; i < out.length; i++) out[i] = this.gaussian() * std
  }
}
