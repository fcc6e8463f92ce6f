/** Typed client for the query service; the only network surface of the UI. */

export interface SearchHit {
  image_id: string;
  distance: number;
  best_caption?: string;
  uri?: string;
}

export interface SearchResponse {
  query: string;
  mode: string;
  results: SearchHit[];
  took_ms: number;
}

export interface HealthResponse {
  status: string;
  index_size: number;
  mode: string;
  default_k: number;
  max_k: number;
}

export interface ImageDetail {
  image_id: string;
  captions: string[];
  uri: string | null;
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = 'ApiError';
  }
}

async function request<T>(url: string): Promise<T> {
  const response = await fetch(url);
  if (!response.ok) {
    let code = 'http_error';
    let message = `${response.status} ${response.statusText}`;
    try {
      const body = await response.json();
      if (body && typeof body.error === 'string') {
        code = body.error;
        message = body.message ?? message;
      }
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(response.status, code, message);
  }
  return response.json() as Promise<T>;
}

export class ApiClient {
  constructor(private readonly baseUrl: string = '') {}

  health(): Promise<HealthResponse> {
    return request(`${this.baseUrl}/api/health`);
  }

  search(q: string, k: number): Promise<SearchResponse> {
    const params = new URLSearchParams({ q, k: String(k) });
    return request(`${this.baseUrl}/api/search?${params}`);
  }

  image(id: string): Promise<ImageDetail> {
    return request(`${this.baseUrl}/api/images/${encodeURIComponent(id)}`);
  }
}
