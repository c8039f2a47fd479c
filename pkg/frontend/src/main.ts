import { Client } from "./api.js";
import { initApp } from "./app.js";

// the API origin can differ from wherever this page is served; ?api= overrides
const base =
  new URLSearchParams(window.location.search).get("api") ?? window.location.origin;
const controller = initApp(document, new Client(base));
void controller.refreshCheckpoints().catch((err) => {
  console.error("checkpoint listing failed", err);
});
