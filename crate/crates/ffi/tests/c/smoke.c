#include <stdio.h>
#include <string.h>

#include "ginas.h"

#define CHECK(expr)                                                           \
    do {                                                                      \
        if ((expr) != GINAS_STATUS_OK) {                                      \
            fprintf(stderr, "%s failed: %s\n", #expr, ginas_last_error_message()); \
            return 1;                                                         \
        }                                                                     \
    } while (0)

int main(void) {
    double a[4] = {0.1, 0.2, 0.3, 0.4};
    double b[4] = {0.1, 0.2, 0.3, 0.5};
    double psnr = 0.0;
    CHECK(ginas_psnr(a, b, 4, &psnr));
    if (psnr < 25.9 || psnr > 26.1) {
        fprintf(stderr, "unexpected psnr %f\n", psnr);
        return 1;
    }

    if (ginas_psnr(NULL, b, 4, &psnr) != GINAS_STATUS_NULL_POINTER) {
        return 1;
    }
    if (strlen(ginas_last_error_message()) == 0) {
        return 1;
    }

    GinasConfig *cfg = NULL;
    CHECK(ginas_config_default(&cfg));
    CHECK(ginas_config_set_candidates(cfg, 2));
    CHECK(ginas_config_set_iterations(cfg, 5));
    GinasReport *report = NULL;
    CHECK(ginas_run_attack(cfg, &report));
    size_t count = 0;
    CHECK(ginas_report_candidate_count(report, &count));
    char *text = NULL;
    CHECK(ginas_report_to_toml(report, &text));
    printf("candidates %zu, report %zu bytes\n", count, strlen(text));
    ginas_string_free(text);
    ginas_report_free(report);
    ginas_config_free(cfg);
    return count == 2 ? 0 : 1;
}
