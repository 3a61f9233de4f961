/** Page wiring: binds Session to the DOM.
 *
 * Layout: image list on the left, annotation canvas in the middle, controls
 * (level switcher, guess slider, instance list, submit) on the right.  All
 * annotation logic lives in Session; this module only renders and forwards
 * events, so it stays untested except through the browser.
 */

import { AnnotationClient, Level } from "./api.js";
import { drawBoundaries, drawDots, instanceColor, selectionOverlay } from "./render.js";
import { ALPHA_RANGE, DEFAULT_ALPHA, LEVELS, Session } from "./state.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) node.setAttribute(key, value);
  if (text) node.textContent = text;
  return node;
}

class App {
  session: Session;
  image: HTMLImageElement | null = null;
  canvas: HTMLCanvasElement;
  statusBar: HTMLElement;
  conflictBox: HTMLElement;
  imageList: HTMLElement;
  instanceList: HTMLElement;
  alphaInput: HTMLInputElement;
  alphaLabel: HTMLElement;

  constructor(readonly client: AnnotationClient, readonly root: HTMLElement) {
    this.session = new Session(client);
    this.canvas = el("canvas", { class: "annot-canvas" });
    this.statusBar = el("div", { class: "status" });
    this.conflictBox = el("div", { class: "conflict hidden" });
    this.imageList = el("ul", { class: "image-list" });
    this.instanceList = el("ul", { class: "instance-list" });
    this.alphaInput = el("input", {
      type: "range",
      min: String(ALPHA_RANGE[0]),
      max: String(ALPHA_RANGE[1]),
      step: "0.05",
      value: String(DEFAULT_ALPHA),
    });
    this.alphaLabel = el("span", {}, DEFAULT_ALPHA.toFixed(2));
  }

  async start(): Promise<void> {
    this.buildLayout();
    const images = await this.client.listImages();
    for (const info of images) {
      const item = el("li", { "data-image": info.id }, info.id);
      item.addEventListener("click", () => void this.openImage(info.id));
      this.imageList.appendChild(item);
    }
    const first = images[0];
    if (first) await this.openImage(first.id);
  }

  buildLayout(): void {
    const left = el("aside", { class: "pane pane-left" });
    left.append(el("h2", {}, "Images"), this.imageList);

    const center = el("main", { class: "pane pane-center" });
    center.append(this.canvas, this.statusBar, this.conflictBox);

    const right = el("aside", { class: "pane pane-right" });
    right.append(el("h2", {}, "Level"));
    const levelRow = el("div", { class: "level-row" });
    for (const level of LEVELS) {
      const button = el("button", { "data-level": level }, level);
      button.addEventListener("click", () => void this.switchLevel(level));
      levelRow.appendChild(button);
    }
    right.append(levelRow, el("h2", {}, "Guess"));
    const guessRow = el("div", { class: "guess-row" });
    this.alphaInput.addEventListener("input", () => {
      this.alphaLabel.textContent = Number(this.alphaInput.value).toFixed(2);
    });
    const guessButton = el("button", {}, "Fetch guess");
    guessButton.addEventListener("click", () => void this.fetchGuess());
    const acceptButton = el("button", {}, "Accept");
    acceptButton.addEventListener("click", () => this.withRedraw(() => this.session.acceptGuess()));
    const rejectButton = el("button", {}, "Reject");
    rejectButton.addEventListener("click", () => this.withRedraw(() => this.session.rejectGuess()));
    guessRow.append(this.alphaInput, this.alphaLabel, guessButton, acceptButton, rejectButton);
    right.append(guessRow, el("h2", {}, "Instances"), this.instanceList);
    const newButton = el("button", {}, "New instance");
    newButton.addEventListener("click", () => this.withRedraw(() => void this.session.newInstance()));
    const submitButton = el("button", { class: "submit" }, "Submit");
    submitButton.addEventListener("click", () => void this.submit());
    right.append(newButton, submitButton);

    this.root.append(left, center, right);

    this.canvas.addEventListener("click", (event) => {
      const rect = this.canvas.getBoundingClientRect();
      const col = Math.floor(((event.clientX - rect.left) / rect.width) * this.canvas.width);
      const row = Math.floor(((event.clientY - rect.top) / rect.height) * this.canvas.height);
      this.withRedraw(() => void this.session.toggleAtPixel(row, col));
    });
  }

  withRedraw(action: () => void): void {
    try {
      action();
      this.redraw();
    } catch (err) {
      this.showStatus(err instanceof Error ? err.message : String(err), true);
    }
  }

  async openImage(imageId: string): Promise<void> {
    await this.session.open(imageId, this.session.level);
    this.image = new Image();
    this.image.src = this.client.imageUrl(imageId);
    await this.image.decode();
    this.canvas.width = this.image.naturalWidth;
    this.canvas.height = this.image.naturalHeight;
    this.redraw();
    this.showStatus(`opened ${imageId}`);
  }

  async switchLevel(level: Level): Promise<void> {
    try {
      await this.session.setLevel(level);
      this.redraw();
      this.showStatus(`level ${level}`);
    } catch (err) {
      this.showStatus(err instanceof Error ? err.message : String(err), true);
    }
  }

  async fetchGuess(): Promise<void> {
    try {
      await this.session.fetchGuess(Number(this.alphaInput.value));
      this.redraw();
    } catch (err) {
      this.showStatus(err instanceof Error ? err.message : String(err), true);
    }
  }

  async submit(): Promise<void> {
    try {
      const revision = await this.session.submit();
      if (revision === null) {
        this.showConflict();
      } else {
        this.conflictBox.classList.add("hidden");
        this.showStatus(`saved revision ${revision}`);
      }
    } catch (err) {
      this.showStatus(err instanceof Error ? err.message : String(err), true);
    }
    this.redraw();
  }

  /** Conflict dialog: keep local edits visible, offer reload or retry. */
  showConflict(): void {
    const conflict = this.session.conflict;
    if (!conflict) return;
    this.conflictBox.replaceChildren();
    this.conflictBox.classList.remove("hidden");
    this.conflictBox.append(
      el("p", {}, `Annotation changed on the server: ${conflict.message}`),
    );
    const reload = el("button", {}, "Load server version");
    reload.addEventListener("click", () => {
      void this.session.reloadFromServer().then(() => {
        this.conflictBox.classList.add("hidden");
        this.redraw();
        this.showStatus("reloaded server annotation");
      });
    });
    const retry = el("button", {}, "Overwrite with my edits");
    retry.addEventListener("click", () => {
      void this.session.reloadFromServer().then(() => void this.submit());
    });
    this.conflictBox.append(reload, retry);
  }

  showStatus(message: string, isError = false): void {
    this.statusBar.textContent = message;
    this.statusBar.classList.toggle("error", isError);
  }

  redraw(): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx || !this.image) return;
    ctx.drawImage(this.image, 0, 0);
    const state = this.session.levels.get(this.session.level);
    if (state) {
      const overlay = selectionOverlay(
        state.labelMap,
        state.instances,
        state.activeInstance,
        this.session.guess,
      );
      const scratch = document.createElement("canvas");
      scratch.width = overlay.width;
      scratch.height = overlay.height;
      const scratchCtx = scratch.getContext("2d");
      if (scratchCtx) {
        const img = scratchCtx.createImageData(overlay.width, overlay.height);
        img.data.set(overlay.data);
        scratchCtx.putImageData(img, 0, 0);
        ctx.drawImage(scratch, 0, 0);
      }
      drawBoundaries(ctx, state.superpixels);
    }
    drawDots(ctx, this.session.dots);
    this.renderInstances();
  }

  renderInstances(): void {
    this.instanceList.replaceChildren();
    const state = this.session.levels.get(this.session.level);
    if (!state) return;
    for (const [id, set] of state.instances) {
      const [r, g, b] = instanceColor(id);
      const item = el("li", { "data-instance": String(id) });
      const swatch = el("span", { class: "swatch" });
      swatch.style.backgroundColor = `rgb(${r}, ${g}, ${b})`;
      item.append(swatch, el("span", {}, ` instance ${id} (${set.size} superpixels)`));
      if (id === state.activeInstance) item.classList.add("active");
      item.addEventListener("click", () => this.withRedraw(() => this.session.selectInstance(id)));
      this.instanceList.appendChild(item);
    }
  }
}

export function mount(root: HTMLElement, baseUrl: string): App {
  const app = new App(new AnnotationClient(baseUrl), root);
  void app.start();
  return app;
}

declare global {
  interface Window {
    panicleApp?: App;
  }
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  // ?service=http://host:port points the page at a service on another origin
  const override = new URLSearchParams(window.location.search).get("service");
  window.panicleApp = mount(
    document.getElementById("app") as HTMLElement,
    override ?? window.location.origin,
  );
}
