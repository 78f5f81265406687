import { ReviewApi } from "./api.js";
import { ReviewApp } from "./app.js";

const params = new URLSearchParams(window.location.search);
const reviewer = params.get("reviewer") ?? "reviewer";
const root = document.getElementById("app");
if (!root) throw new Error("missing #app mount point");

const app = new ReviewApp(root, new ReviewApi(""), { reviewer });
void app.start();
