/** Two-rank flow: every rank shows tensor a0 and its own shard of b0. */

import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { ProcessGroup, SafeTensorsFileLoader, writeFile } from "../src/index.js";

function makeFixtures(dir: string): { a: string; b: string } {
  const a0 = new Float32Array([0, 1, 2, 3, 4, 5]);
  const b0 = new Float32Array([0, 1, 2, 3, 4, 5, 6, 7]);
  const a = path.join(dir, "a.safetensors");
  const b = path.join(dir, "b.safetensors");
  fs.writeFileSync(a, writeFile({
    a0: { dtype: "F32", shape: [2, 3], data: new Uint8Array(a0.buffer) },
  }));
  fs.writeFileSync(b, writeFile({
    b0: { dtype: "F32", shape: [2, 4], data: new Uint8Array(b0.buffer) },
  }));
  return { a, b };
}

async function main(): Promise<void> {
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), "aggload-multi-"));
  const { a, b } = makeFixtures(dir);

  const group = new ProcessGroup(2);
  const filemap = { 0: [a], 1: [b] };

  await Promise.all(
    [0, 1].map(async (rank) => {
      const loader = new SafeTensorsFileLoader(group, "host", rank);
      loader.add_filenames(filemap);
      const fb = await loader.copy_files_to_device();
      const tensor_a0 = await fb.get_tensor("a0");
      const tensor_b0_sharded = await fb.get_sharded("b0", 1);
      console.log(`RANK ${rank}: a0 ${tensor_a0}`);
      console.log(`RANK ${rank}: b0 sharded ${tensor_b0_sharded}`);
      fb.close();
      loader.close();
    }),
  );
}

main().catch((err) => {
  console.error(err);
  process.exit(1);
});
