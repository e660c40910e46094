// Fixed-depth time series for the strip charts (60 s at 20 Hz by default).

export class RingBuffer {
  readonly width: number;
  readonly capacity: number;
  private times: Float64Array;
  private values: Float64Array;
  private head = 0;
  private count = 0;

  constructor(width: number, capacity = 1200) {
    this.width = width;
    this.capacity = capacity;
    this.times = new Float64Array(capacity);
    this.values = new Float64Array(capacity * width);
  }

  get length(): number {
    return this.count;
  }

  push(t: number, row: number[]): void {
    if (row.length !== this.width) {
      throw new Error(`expected ${this.width} values, got ${row.length}`);
    }
    this.times[this.head] = t;
    for (let i = 0; i < this.width; i++) {
      this.values[this.head * this.width + i] = row[i];
    }
    this.head = (this.head + 1) % this.capacity;
    if (this.count < this.capacity) this.count++;
  }

  clear(): void {
    this.head = 0;
    this.count = 0;
  }

  /** Rows oldest-first: [t, v0, v1, ...] per row. */
  rows(): number[][] {
    const out: number[][] = [];
    const start = (this.head - this.count + this.capacity) % this.capacity;
    for (let k = 0; k < this.count; k++) {
      const i = (start + k) % this.capacity;
      const row = [this.times[i]];
      for (let j = 0; j < this.width; j++) row.push(this.values[i * this.width + j]);
      out.push(row);
    }
    return out;
  }

  latest(): number[] | null {
    if (this.count === 0) return null;
    const i = (this.head - 1 + this.capacity) % this.capacity;
    const row = [this.times[i]];
    for (let j = 0; j < this.width; j++) row.push(this.values[i * this.width + j]);
    return row;
  }
}
