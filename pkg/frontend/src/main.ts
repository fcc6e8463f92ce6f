import { ApiClient } from './api';
import { createApp } from './app';
import './style.css';

// backend base url: ?api=<url> wins, then the build-time value, then same origin
const override = new URLSearchParams(window.location.search).get('api');
const baseUrl = override ?? import.meta.env.VITE_API_BASE ?? '';

const app = createApp(document.getElementById('app')!, new ApiClient(baseUrl));
void app.init();
