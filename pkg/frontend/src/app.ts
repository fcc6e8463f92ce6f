/** Search console shell: one page, in-memory state, no routing.
 *
 * Results are rendered exactly in API order (the service already sorts by
 * distance); a monotonic request counter drops stale search responses when
 * the user submits again before the previous call lands. Errors surface in
 * a dismissible banner and never clear the previous results.
 */

import { ApiClient, ApiError, type SearchResponse } from './api';
import {
  renderDetail,
  renderDetailNotFound,
  renderGrid,
} from './render';

export interface UiSearchState {
  query: string;
  k: number;
  lastResponse: SearchResponse | null;
  loading: boolean;
  error: string | null;
}

const K_CHOICES = [1, 3, 5, 10, 20, 50, 100];

export class App {
  readonly state: UiSearchState = {
    query: '',
    k: 10,
    lastResponse: null,
    loading: false,
    error: null,
  };

  private requestCounter = 0;

  private readonly form: HTMLFormElement;
  private readonly input: HTMLInputElement;
  private readonly kSelect: HTMLSelectElement;
  private readonly submit: HTMLButtonElement;
  private readonly banner: HTMLElement;
  private readonly bannerText: HTMLElement;
  private readonly status: HTMLElement;
  private readonly results: HTMLElement;
  private readonly detail: HTMLElement;

  constructor(
    private readonly root: HTMLElement,
    private readonly client: ApiClient,
  ) {
    root.innerHTML = `
      <header class="top">
        <h1>image search</h1>
        <form id="search-form" autocomplete="off">
          <input id="query" type="text" placeholder="describe the image you want" aria-label="query">
          <select id="k" aria-label="results to fetch"></select>
          <button id="submit" type="submit" disabled>Search</button>
        </form>
      </header>
      <div id="banner" class="banner hidden" role="alert">
        <span id="banner-text"></span>
        <button id="banner-dismiss" type="button" aria-label="dismiss">&times;</button>
      </div>
      <p id="status" class="status"></p>
      <main id="results" class="grid"></main>
      <aside id="detail" class="detail hidden"></aside>`;

    this.form = root.querySelector('#search-form')!;
    this.input = root.querySelector('#query')!;
    this.kSelect = root.querySelector('#k')!;
    this.submit = root.querySelector('#submit')!;
    this.banner = root.querySelector('#banner')!;
    this.bannerText = root.querySelector('#banner-text')!;
    this.status = root.querySelector('#status')!;
    this.results = root.querySelector('#results')!;
    this.detail = root.querySelector('#detail')!;

    this.populateKChoices(10, 100);
    this.wireEvents();
  }

  /** Bound k choices by the service's advertised limits. */
  async init(): Promise<void> {
    try {
      const health = await this.client.health();
      this.populateKChoices(health.default_k, health.max_k);
      this.status.textContent =
        `${health.index_size} images indexed (${health.mode})`;
    } catch (error) {
      this.showError(describeError(error));
    }
  }

  private populateKChoices(defaultK: number, maxK: number): void {
    const choices = [...new Set([...K_CHOICES.filter((v) => v <= maxK), defaultK])]
      .sort((a, b) => a - b);
    this.kSelect.innerHTML = choices
      .map((v) => `<option value="${v}">${v}</option>`)
      .join('');
    this.kSelect.value = String(defaultK);
    this.state.k = defaultK;
  }

  private wireEvents(): void {
    this.input.addEventListener('input', () => {
      this.state.query = this.input.value;
      this.submit.disabled = this.input.value.trim() === '';
    });
    this.kSelect.addEventListener('change', () => {
      this.state.k = Number(this.kSelect.value);
    });
    this.form.addEventListener('submit', (event) => {
      event.preventDefault();
      void this.runSearch();
    });
    this.root.querySelector('#banner-dismiss')!.addEventListener('click', () => {
      this.state.error = null;
      this.banner.classList.add('hidden');
    });
    this.results.addEventListener('click', (event) => {
      const card = (event.target as HTMLElement).closest<HTMLElement>('.card');
      if (card) {
        void this.openDetail(card.dataset.imageId!, card.dataset.bestCaption ?? '');
      }
    });
    this.detail.addEventListener('click', (event) => {
      const target = event.target as HTMLElement;
      if (target.classList.contains('close')) {
        this.detail.classList.add('hidden');
      } else if (target.classList.contains('refine')) {
        // refine loop: copy the caption into the box but never auto-submit
        this.input.value = target.dataset.caption ?? '';
        this.input.dispatchEvent(new Event('input'));
        this.input.focus();
      }
    });
  }

  async runSearch(): Promise<void> {
    const query = this.input.value.trim();
    if (!query) {
      return;
    }
    const requestId = ++this.requestCounter;
    this.state.loading = true;
    this.submit.classList.add('loading');
    try {
      const response = await this.client.search(query, this.state.k);
      if (requestId !== this.requestCounter) {
        return; // a newer submit superseded this one
      }
      this.state.lastResponse = response;
      this.state.error = null;
      this.banner.classList.add('hidden');
      this.results.innerHTML = renderGrid(response);
      this.status.textContent =
        `${response.results.length} results for "${response.query}" in ${response.took_ms.toFixed(1)} ms`;
    } catch (error) {
      if (requestId !== this.requestCounter) {
        return;
      }
      this.showError(describeError(error));
    } finally {
      if (requestId === this.requestCounter) {
        this.state.loading = false;
        this.submit.classList.remove('loading');
      }
    }
  }

  async openDetail(imageId: string, bestCaption: string): Promise<void> {
    this.detail.classList.remove('hidden');
    try {
      const detail = await this.client.image(imageId);
      this.detail.innerHTML = renderDetail(detail, bestCaption);
    } catch (error) {
      if (error instanceof ApiError && error.status === 404) {
        this.detail.innerHTML = renderDetailNotFound(imageId);
      } else {
        this.showError(describeError(error));
      }
    }
  }

  private showError(message: string): void {
    this.state.error = message;
    this.bannerText.textContent = message;
    this.banner.classList.remove('hidden');
  }
}

function describeError(error: unknown): string {
  if (error instanceof ApiError) {
    return error.message;
  }
  return error instanceof Error ? error.message : String(error);
}

export function createApp(root: HTMLElement, client: ApiClient): App {
  return new App(root, client);
}
