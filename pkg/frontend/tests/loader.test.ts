import { execFileSync } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { describe, expect, it } from "vitest";

import {
  BoundTensor,
  ProcessGroup,
  RendezvousTimeout,
  SafeTensorsFileLoader,
  SingleGroup,
  UnknownKey,
  UseAfterClose,
  writeFile,
} from "../src/index.js";

function tmpdir(): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), "aggload-ldr-"));
}

function writeFixture(
  dir: string,
  name: string,
  tensors: Record<string, { dtype: any; shape: number[]; data: Uint8Array }>,
  padHeaderTo: number | null = null,
): string {
  const file = path.join(dir, name);
  fs.writeFileSync(file, writeFile(tensors, null, padHeaderTo));
  return file;
}

function bytesOf(t: BoundTensor): Uint8Array {
  return new Uint8Array(t.array.buffer, t.array.byteOffset, t.array.byteLength);
}

describe("single-rank flow", () => {
  it("loads a tensor bitwise equal to the file bytes", async () => {
    const dir = tmpdir();
    const values = new Float32Array([0, 1, 2, 3, 4, 5]);
    const file = writeFixture(dir, "a.safetensors", {
      a0: { dtype: "F32", shape: [2, 3], data: new Uint8Array(values.buffer) },
    });
    const loader = new SafeTensorsFileLoader(SingleGroup(), "host");
    loader.add_filenames({ 0: [file] });
    const fb = await loader.copy_files_to_device();
    const a0 = await fb.get_tensor("a0");
    expect(a0.shape).toEqual([2, 3]);
    expect(a0.strides).toEqual([3, 1]); // element strides at the boundary
    expect(a0.byteStrides).toEqual([12, 4]);
    expect([...(a0.array as Float32Array)]).toEqual([0, 1, 2, 3, 4, 5]);
    expect(a0.at(1, 2)).toBe(5);
    fb.close();
    loader.close();
  });

  it("handles odd headers by re-landing misaligned tensors", async () => {
    const dir = tmpdir();
    const values = new Float64Array([1.5, -2.25, 3.125]);
    const file = writeFixture(
      dir, "odd.safetensors",
      { d: { dtype: "F64", shape: [3], data: new Uint8Array(values.buffer) } },
      99, // bodyOffset 107, not divisible by 8
    );
    const loader = new SafeTensorsFileLoader(SingleGroup(), "host");
    loader.add_filenames({ 0: [file] });
    const fb = await loader.copy_files_to_device();
    const d = await fb.get_tensor("d");
    expect(d.array.byteOffset % 8).toBe(0);
    expect([...(d.array as Float64Array)]).toEqual([1.5, -2.25, 3.125]);
    fb.close();
  });

  it("raises typed errors after close and for unknown keys", async () => {
    const dir = tmpdir();
    const file = writeFixture(dir, "x.safetensors", {
      x: { dtype: "U8", shape: [2], data: new Uint8Array([7, 9]) },
    });
    const loader = new SafeTensorsFileLoader(SingleGroup(), "host");
    loader.add_filenames({ 0: [file] });
    const fb = await loader.copy_files_to_device();
    await expect(fb.get_tensor("nope")).rejects.toBeInstanceOf(UnknownKey);
    fb.close();
    await expect(fb.get_tensor("x")).rejects.toBeInstanceOf(UseAfterClose);
    loader.close();
  });
});

describe("two-rank flow", () => {
  it("broadcasts full tensors and scatters shards that reconstruct", async () => {
    const dir = tmpdir();
    const a0 = new Float32Array([0, 1, 2, 3, 4, 5]);
    const b0 = new Float32Array([0, 1, 2, 3, 4, 5, 6, 7]);
    const fa = writeFixture(dir, "a.safetensors", {
      a0: { dtype: "F32", shape: [2, 3], data: new Uint8Array(a0.buffer) },
    });
    const fb_ = writeFixture(dir, "b.safetensors", {
      b0: { dtype: "F32", shape: [2, 4], data: new Uint8Array(b0.buffer) },
    });

    const group = new ProcessGroup(2);
    const filemap = { 0: [fa], 1: [fb_] };
    const results = await Promise.all(
      [0, 1].map(async (rank) => {
        const loader = new SafeTensorsFileLoader(group, "host", rank);
        loader.add_filenames(filemap);
        const fb = await loader.copy_files_to_device();
        const full = await fb.get_tensor("a0");
        const shard = await fb.get_sharded("b0", 1);
        fb.close();
        loader.close();
        return { full, shard };
      }),
    );

    for (const { full } of results) {
      expect([...(full.array as Float32Array)]).toEqual([0, 1, 2, 3, 4, 5]);
    }
    expect(results[0].shard.shape).toEqual([2, 2]);
    expect([...(results[0].shard.array as Float32Array)]).toEqual([0, 1, 4, 5]);
    expect([...(results[1].shard.array as Float32Array)]).toEqual([2, 3, 6, 7]);
  });

  it("splits remainders toward lower ranks on dim 0", async () => {
    const dir = tmpdir();
    const v = new Int32Array([10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24]);
    const file = writeFixture(dir, "r.safetensors", {
      r: { dtype: "I32", shape: [5, 3], data: new Uint8Array(v.buffer) },
    });
    const group = new ProcessGroup(2);
    const filemap = { 0: [file] };
    const shards = await Promise.all(
      [0, 1].map(async (rank) => {
        const loader = new SafeTensorsFileLoader(group, "host", rank);
        loader.add_filenames(filemap);
        const fb = await loader.copy_files_to_device();
        const shard = await fb.get_sharded("r", 0);
        fb.close();
        return shard;
      }),
    );
    expect(shards[0].shape).toEqual([3, 3]);
    expect(shards[1].shape).toEqual([2, 3]);
    expect([...(shards[0].array as Int32Array), ...(shards[1].array as Int32Array)])
      .toEqual([...v]);
  });

  it("turns ordering bugs into RendezvousTimeout", async () => {
    const dir = tmpdir();
    const fa = writeFixture(dir, "a.safetensors", {
      a0: { dtype: "U8", shape: [1], data: new Uint8Array([1]) },
    });
    const fb_ = writeFixture(dir, "b.safetensors", {
      b0: { dtype: "U8", shape: [1], data: new Uint8Array([2]) },
    });
    const group = new ProcessGroup(2, 500);
    const filemap = { 0: [fa], 1: [fb_] };
    const outcome = await Promise.allSettled(
      [0, 1].map(async (rank) => {
        const loader = new SafeTensorsFileLoader(group, "host", rank);
        loader.add_filenames(filemap);
        const fb = await loader.copy_files_to_device();
        const order = rank === 0 ? ["a0", "b0"] : ["b0", "a0"];
        for (const key of order) await fb.get_tensor(key);
      }),
    );
    expect(outcome.some(
      (r) => r.status === "rejected" && r.reason instanceof RendezvousTimeout,
    )).toBe(true);
  });

  it("times out when a rank skips a collective", async () => {
    const dir = tmpdir();
    const fa = writeFixture(dir, "a.safetensors", {
      a0: { dtype: "U8", shape: [1], data: new Uint8Array([1]) },
    });
    const group = new ProcessGroup(2, 300);
    const filemap = { 0: [fa] };
    const outcome = await Promise.allSettled(
      [0, 1].map(async (rank) => {
        const loader = new SafeTensorsFileLoader(group, "host", rank);
        loader.add_filenames(filemap);
        const fb = await loader.copy_files_to_device();
        if (rank === 1) return "skipped";
        await fb.get_tensor("a0");
        return "done";
      }),
    );
    expect(outcome[0].status).toBe("rejected");
    expect((outcome[0] as PromiseRejectedResult).reason).toBeInstanceOf(RendezvousTimeout);
  });
});

describe("cross-language pipeline", () => {
  it("loads a primary-generated corpus; bytes match direct file slicing", async () => {
    const dir = tmpdir();
    execFileSync("python3", [
      "-m", "aggload", "gen", "--files", "2", "--bytes-per-file", "8192",
      "--dtype", "mixed", "--seed", "5", "--out", dir,
    ]);
    const files = fs.readdirSync(dir).sort().map((n) => path.join(dir, n));
    const loader = new SafeTensorsFileLoader(SingleGroup(), "host");
    loader.add_filenames({ 0: files });
    const fb = await loader.copy_files_to_device();
    for (const file of files) {
      // oracle: the primary CLI's inspect output plus direct byte slicing
      const doc = JSON.parse(execFileSync(
        "python3", ["-m", "aggload", "inspect", file], { encoding: "utf-8" },
      ));
      const raw = fs.readFileSync(file);
      for (const t of doc.tensors) {
        const view = await fb.get_tensor(t.name);
        const expect_ = raw.subarray(
          doc.body_offset + t.data_offsets[0],
          doc.body_offset + t.data_offsets[1],
        );
        expect(Buffer.from(bytesOf(view)).equals(expect_)).toBe(true);
      }
    }
    fb.close();
    loader.close();
  });
});
